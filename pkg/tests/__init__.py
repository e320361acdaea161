"""Predictive Sampler テストパッケージ."""
