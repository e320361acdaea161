"""Predictive Sampler: 離散自己回帰モデルの予測サンプリングによる高速化エンジン."""
