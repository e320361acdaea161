"""学習・ベンチマーク・マップ・アブレーション・検証の各コマンド.

どのコマンドも (設定, シード) の決定的な関数で、出力ディレクトリに CSV / PGM /
チェックポイント / 実行記録を書く。ベンチマークの各行は祖先サンプリングとの一致を
確認してから記録する。
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.arm import ArmModel, check_causality
from src.artifacts import (
    ArtifactFormatError,
    RunRecord,
    load_checkpoint,
    load_dataset_cache,
    load_noise,
    load_run_record,
    save_checkpoint,
    save_dataset_cache,
    save_noise,
    save_run_record,
)
from src.config import ConfigError, get_output_dir, resolve_path
from src.datasets import Dataset, DatasetError, downsample, load_idx, quantize, split, synth_bars, synth_parity
from src.forecasting import Forecaster
from src.maps import grid_shape, render_sample_maps
from src.metrics import (
    BENCH_COLUMNS,
    SUMMARY_COLUMNS,
    BenchRow,
    aggregate_rows,
    build_reference_footer,
    build_summary_text,
    call_percentage,
    mean_and_std,
)
from src.numeric import Rng
from src.reparam import NoiseGrid, sample_gumbel_grid, seeded_noise_grid
from src.sampler import (
    ExactnessError,
    ForecastStrategy,
    SamplerError,
    StrategyKind,
    ancestral_batch,
    ancestral_sample,
    batch_sample,
    first_mismatch,
    make_strategy,
    predictive_sample,
)
from src.training import TrainCurve, train_arm, train_forecaster

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.psam"
CURVE_COLUMNS = ["step", "train_bpd", "val_bpd", "forecast_loss"]
ABLATE_COLUMNS = ["condition", "n", "mean", "std"]
ABLATE_RUN_COLUMNS = ["condition", "seed", "arm_calls", "call_percentage"]


def _write_csv(path: Path, columns: list[str], rows: list[list[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
    logger.info("CSV を書き出した: %s (%d 行)", path, len(rows))


def write_curve_csv(path: Path, curve: TrainCurve) -> None:
    rows = [
        [str(p.step), repr(p.train_bpd), repr(p.val_bpd), repr(p.forecast_loss)]
        for p in curve.points
    ]
    _write_csv(path, CURVE_COLUMNS, rows)


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def build_dataset(config: dict) -> tuple[Dataset, Dataset, Dataset]:
    """設定に従ってデータセットを作り、train / validation / test に分ける.

    Raises:
        ConfigError: idx / cache でパスが指定されていない、または読めない場合
        ConfigError: 件数が少なく分割後に空の部分ができる場合（field は dataset.n）
    """
    ds = config["dataset"]
    rng = Rng(int(ds["seed"]))
    kind = ds["kind"]
    if kind == "parity":
        dataset = synth_parity(int(ds["n"]), int(ds["length"]), rng.derive("data"), float(ds["flip_prob"]))
    elif kind == "bars":
        dataset = synth_bars(int(ds["n"]), int(ds["side"]), rng.derive("data"), float(ds["bar_prob"]))
    else:
        if not ds["path"]:
            raise ConfigError("dataset.path", f"dataset.kind={kind} にはパスが必要")
        path = resolve_path(ds["path"])
        if not path.exists():
            raise ConfigError("dataset.path", f"ファイルが見つからない: {path}")
        try:
            if kind == "idx":
                images = load_idx(path)
                if not ds["full_resolution"]:
                    images = downsample(images, 2)
                dataset = quantize(images, int(ds["bits"]), name="mnist")
            else:
                dataset = load_dataset_cache(path)
        except DatasetError as e:
            raise ConfigError("dataset.path", str(e)) from e
    logger.info("データセットを構築した: %s n=%d d=%d K=%d", dataset.name, len(dataset), dataset.d, dataset.K)
    try:
        return split(dataset, [float(f) for f in ds["fractions"]], rng.derive("split"))
    except DatasetError as e:
        raise ConfigError("dataset.n", f"{len(dataset)} 件を fractions={ds['fractions']} で分割できない: {e}") from e


def dataset_shape(config: dict, d: int) -> tuple[int, int, int]:
    """マップ用の画像形状. maps.shape, dataset.shape, 正方形の順に決める."""
    shape = config["maps"]["shape"] or config["dataset"]["shape"]
    if not shape and config["dataset"]["kind"] == "bars":
        side = int(config["dataset"]["side"])
        shape = [side, side]
    return grid_shape(d, shape)


def build_model(config: dict, d: int, K: int, hidden: int | None = None) -> ArmModel:
    m = config["model"]
    return ArmModel.initialize(
        d,
        K,
        Rng(int(m["seed"])).derive("init"),
        hidden=int(m["hidden"]) if hidden is None else hidden,
        embed=int(m["embed"]),
        layers=int(m["layers"]),
        zero_output=bool(m["zero_output"]),
    )


def build_forecaster(config: dict, model: ArmModel, horizon: int | None = None) -> Forecaster:
    f = config["forecaster"]
    return Forecaster.for_model(
        model,
        int(f["horizon"]) if horizon is None else horizon,
        condition_on_last_token=bool(f["condition_on_last_token"]),
        condition_on_noise=bool(f["condition_on_noise"]),
    )


@dataclass
class TrainResult:
    model: ArmModel
    forecaster: Forecaster | None
    curve: TrainCurve
    checkpoint: Path
    paths: list[Path] = field(default_factory=list)


def fit_models(
    config: dict,
    train: Dataset,
    validation: Dataset | None,
    rng: Rng,
    hidden: int | None = None,
) -> tuple[ArmModel, Forecaster | None, TrainCurve, TrainCurve | None]:
    """ARM と予測モジュールを設定どおりに学習する（同時学習または事後学習）.

    Returns:
        (ARM, 予測モジュール, ARM の学習曲線, 事後学習の曲線（同時学習なら None）)
    """
    model = build_model(config, train.d, train.K, hidden)
    forecaster = build_forecaster(config, model) if config["forecaster"]["enabled"] else None
    joint = bool(config["training"]["joint"])
    model, curve = train_arm(model, train, config, rng.derive("arm"), validation, forecaster if joint else None)
    f_curve = None
    if forecaster is not None and not joint:
        forecaster, f_curve = train_forecaster(model, forecaster, train, config, rng.derive("forecaster"))
    return model, forecaster, curve, f_curve


def cmd_train(config: dict) -> TrainResult:
    """モデル（と予測モジュール）を学習し、チェックポイントと学習曲線 CSV を書く."""
    out_dir = get_output_dir(config)
    train, validation, _ = build_dataset(config)
    rng = Rng(int(config["training"]["seed"]))

    model, forecaster, curve, f_curve = fit_models(config, train, validation, rng)
    paths = []
    if f_curve is not None:
        f_path = out_dir / "forecaster_curve.csv"
        write_curve_csv(f_path, f_curve)
        paths.append(f_path)

    causality = check_causality(model, 20, rng.derive("causality"))
    if not causality.passed:
        logger.error("学習後のモデルが因果性を満たさない: 位置 %s", causality.position)

    checkpoint = out_dir / CHECKPOINT_NAME
    save_checkpoint(checkpoint, model, forecaster)
    curve_path = out_dir / "train_curve.csv"
    write_curve_csv(curve_path, curve)
    cache_path = out_dir / "train.psds"
    if train.K <= 256:
        save_dataset_cache(cache_path, train)
        paths.append(cache_path)
    paths.extend([checkpoint, curve_path])
    return TrainResult(model, forecaster, curve, checkpoint, paths)


def load_checkpoints(config: dict) -> tuple[ArmModel, Forecaster | None]:
    """出力ディレクトリのチェックポイントを読む.

    Raises:
        ConfigError: チェックポイントが存在しない場合
    """
    path = get_output_dir(config) / CHECKPOINT_NAME
    if not path.exists():
        raise ConfigError("output.dir", f"チェックポイントが見つからない（先に train を実行する）: {path}")
    return load_checkpoint(path)


def _strategy_for(name: str, forecaster: Forecaster | None, field_name: str) -> ForecastStrategy:
    if name == StrategyKind.LEARNED.value:
        if forecaster is None:
            raise ConfigError(field_name, "learned 戦略には学習済みの予測モジュールが必要")
        return make_strategy(name, forecaster, share_representation=forecaster.use_hidden)
    return make_strategy(name)


def _verify_outputs(strategy: str, seed: int, outputs: list[np.ndarray], references: list[np.ndarray]) -> None:
    for index, (got, want) in enumerate(zip(outputs, references)):
        position = first_mismatch(got, want)
        if position is not None:
            logger.error("祖先サンプルと一致しない: strategy=%s seed=%d sample=%d position=%d", strategy, seed, index, position)
            raise ExactnessError(strategy, seed, position, index)


def cmd_bench(config: dict) -> list[str]:
    """戦略 × バッチサイズ × シードでサンプリングし、生の行と集計を CSV に書く.

    Returns:
        標準出力に表示する集計表とフッターの行

    Raises:
        ExactnessError: 高速化したサンプルが祖先サンプルと一致しない場合
    """
    bench = config["bench"]
    out_dir = get_output_dir(config)
    model, forecaster = load_checkpoints(config)
    strategies = {
        name: None if name == "baseline" else _strategy_for(name, forecaster, "bench.strategies")
        for name in bench["strategies"]
    }
    dataset_name = config["dataset"]["kind"]
    rows: list[BenchRow] = []
    for batch_size in bench["batch_sizes"]:
        for seed in bench["seeds"]:
            eps_batch = [seeded_noise_grid(seed, index, model.d, model.K) for index in range(batch_size)]
            reference_buffers, reference_report = ancestral_batch(model, eps_batch)
            references = [b.tokens for b in reference_buffers]
            for name, strategy in strategies.items():
                if strategy is None:
                    report = reference_report
                    tokens = references
                    solo_calls = model.d
                    flags = 3
                else:
                    buffers, report = batch_sample(model, strategy, eps_batch)
                    tokens = [b.tokens for b in buffers]
                    _verify_outputs(name, seed, tokens, references)
                    solo_calls = report.samples[0].arm_calls
                    flags = strategy.flags
                row = BenchRow(
                    dataset_name,
                    name,
                    batch_size,
                    seed,
                    report.arm_calls,
                    call_percentage(report.arm_calls, model.d),
                    report.wall_time,
                    report.breakeven_satisfied,
                )
                rows.append(row)
                logger.info(
                    "bench %s batch=%d seed=%d: calls=%d (%.1f%%)",
                    name, batch_size, seed, row.arm_calls, row.call_percentage,
                )
                if bench["record_runs"]:
                    record = RunRecord(seed, 0, name, flags, model.d, model.K, solo_calls, tokens[0])
                    save_run_record(out_dir / "runs" / f"{name}_b{batch_size}_s{seed}.psrn", record)
                    save_noise(noise_path(out_dir / "runs", seed, 0), eps_batch[0])

    summary = aggregate_rows(rows)
    _write_csv(out_dir / "bench_runs.csv", BENCH_COLUMNS, [r.as_csv_row() for r in rows])
    _write_csv(out_dir / "bench_summary.csv", SUMMARY_COLUMNS, [s.as_csv_row() for s in summary])
    first_batch = bench["batch_sizes"][0]
    measured = {s.strategy: s.mean for s in summary if s.batch_size == first_batch}
    lines = build_summary_text(summary) + [""] + build_reference_footer("bench", measured)
    for line in lines:
        logger.info(line)
    return lines


def cmd_maps(config: dict) -> list[Path]:
    """サンプル・予測ミスマップ・収束マップを PGM で書き出す."""
    maps = config["maps"]
    out_dir = get_output_dir(config) / "maps"
    model, forecaster = load_checkpoints(config)
    shape = dataset_shape(config, model.d)
    seed = int(maps["seed"])
    paths: list[Path] = []
    for index in range(int(maps["count"])):
        eps = seeded_noise_grid(seed, index, model.d, model.K)
        reference, reference_report = ancestral_sample(model, eps)
        for name in maps["strategies"]:
            if name == "baseline":
                buffer, report = reference, reference_report
            else:
                buffer, report = predictive_sample(model, _strategy_for(name, forecaster, "maps.strategies"), eps)
                _verify_outputs(name, seed, [buffer.tokens], [reference.tokens])
            paths.extend(
                render_sample_maps(
                    out_dir,
                    f"{name}_s{seed}_{index}",
                    buffer.tokens,
                    model.K,
                    report.mistakes,
                    report.convergence,
                    shape,
                )
            )
    return paths


@dataclass(frozen=True)
class AblateRow:
    condition: str
    n: int
    mean: float
    std: float

    def as_csv_row(self) -> list[str]:
        return [self.condition, str(self.n), repr(self.mean), repr(self.std)]


@dataclass(frozen=True)
class AblateCondition:
    """アブレーションの 1 条件. 容量の掃引では条件ごとに別の ARM を使う."""

    name: str
    model: ArmModel
    strategy: ForecastStrategy


def ablation_conditions(
    config: dict,
    model: ArmModel,
    forecaster: Forecaster | None,
) -> list[AblateCondition]:
    """アブレーションの条件を組み立てる.

    表現共有なしの予測モジュールと予測幅 T の掃引はチェックポイントの ARM に事後学習する。
    隠れ次元 H の掃引は ARM ごと学習し直す（予測ヘッドの入力幅も H になる）。
    """
    if forecaster is None or not forecaster.use_hidden:
        raise ConfigError("forecaster.enabled", "アブレーションには h を入力とする学習済み予測モジュールが必要")
    ablate = config["ablate"]
    train, validation, _ = build_dataset(config)
    rng = Rng(int(config["training"]["seed"])).derive("ablate")
    steps = int(ablate["unshared_steps"])
    unshared = Forecaster.for_model(
        model,
        forecaster.horizon,
        condition_on_last_token=True,
        condition_on_noise=True,
        use_hidden=False,
    )
    unshared, _ = train_forecaster(model, unshared, train, config, rng.derive("unshared"), steps=steps)
    conditions = [
        AblateCondition("fpi", model, make_strategy("fpi")),
        AblateCondition("fpi-no-reparam", model, make_strategy("fpi", use_reparam_noise=False)),
        AblateCondition("learned", model, make_strategy("learned", forecaster)),
        AblateCondition("learned-no-reparam", model, make_strategy("learned", forecaster, use_reparam_noise=False)),
        AblateCondition(
            "learned-no-sharing",
            model,
            make_strategy("learned", unshared, share_representation=False),
        ),
    ]
    for horizon in ablate["horizon_sweep"] or []:
        swept = build_forecaster(config, model, horizon)
        swept, _ = train_forecaster(model, swept, train, config, rng.derive(f"horizon/{horizon}"), steps=steps)
        conditions.append(AblateCondition(f"learned-T{horizon}", model, make_strategy("learned", swept)))
    for hidden in ablate["hidden_sweep"] or []:
        logger.info("隠れ次元 H=%d の ARM と予測モジュールを学習する", hidden)
        swept_model, swept_forecaster, _, _ = fit_models(
            config, train, validation, Rng(int(config["training"]["seed"])), hidden=hidden
        )
        if swept_forecaster is None:
            raise ConfigError("forecaster.enabled", "隠れ次元の掃引には予測モジュールが必要")
        conditions.append(
            AblateCondition(f"learned-H{hidden}", swept_model, make_strategy("learned", swept_forecaster))
        )
    return conditions


def cmd_ablate(config: dict) -> list[str]:
    """再パラメータ化・表現共有・予測容量の効果を測り、条件ごとの平均 ± 標準偏差を CSV に書く.

    時間は記録しないので、同じシード列なら CSV はビット単位で同じになる。
    """
    out_dir = get_output_dir(config)
    model, forecaster = load_checkpoints(config)
    conditions = ablation_conditions(config, model, forecaster)
    per_condition: dict[str, list[float]] = {c.name: [] for c in conditions}
    run_rows: list[list[str]] = []
    for seed in config["ablate"]["seeds"]:
        eps = seeded_noise_grid(seed, 0, model.d, model.K)
        references: dict[int, np.ndarray] = {}
        for c in conditions:
            key = id(c.model)
            if key not in references:
                references[key] = ancestral_sample(c.model, eps)[0].tokens
            buffer, report = predictive_sample(c.model, c.strategy, eps)
            _verify_outputs(c.name, seed, [buffer.tokens], [references[key]])
            per_condition[c.name].append(report.call_percentage)
            run_rows.append([c.name, str(seed), str(report.arm_calls), repr(report.call_percentage)])
    rows = []
    for name, values in per_condition.items():
        mean, std = mean_and_std(values)
        rows.append(AblateRow(name, len(values), mean, std))
    _write_csv(out_dir / "ablate_runs.csv", ABLATE_RUN_COLUMNS, run_rows)
    _write_csv(out_dir / "ablate.csv", ABLATE_COLUMNS, [r.as_csv_row() for r in rows])
    lines = [f"{r.condition:<20} {r.mean:>7.2f} ± {r.std:.2f}" for r in rows]
    lines += [""] + build_reference_footer("ablate", {r.condition: r.mean for r in rows})
    for line in lines:
        logger.info(line)
    return lines


@dataclass
class VerifyResult:
    cases: int = 0
    comparisons: int = 0
    replayed: int = 0


def _check_accounting(name: str, case: int, d: int, report) -> None:
    if not 1 <= report.arm_calls <= d:
        raise SamplerError(f"case {case} {name}: arm_calls {report.arm_calls} outside [1, {d}]")
    if int(report.mistakes.sum()) != report.arm_calls - 1 + report.final_overwrite:
        raise SamplerError(f"case {case} {name}: mistake count does not match arm_calls")


def verify_exactness(
    cases: int,
    lengths: list[int],
    categories: list[int],
    rng: Rng,
    hidden: int = 16,
    embed: int = 8,
    layers: int = 3,
) -> VerifyResult:
    """乱数で作ったモデル・予測モジュール・ノイズで、全戦略の出力を祖先サンプルと照合する.

    Raises:
        ExactnessError: 1 つでも一致しない場合（seed には事例番号が入る）
        SamplerError: 呼び出し回数や予測ミス数の恒等式が崩れた場合
    """
    result = VerifyResult()
    for case in range(cases):
        case_rng = rng.derive(f"case/{case}")
        d = int(lengths[int(case_rng.integers(0, len(lengths)))])
        K = int(categories[int(case_rng.integers(0, len(categories)))])
        flag_bits = case_rng.integers(0, 2, size=4)
        model = ArmModel.initialize(d, K, case_rng.derive("model"), hidden, embed, layers, zero_output=False)
        forecaster = Forecaster.for_model(
            model,
            1 + int(case_rng.integers(0, 4)),
            condition_on_last_token=bool(flag_bits[0]),
            condition_on_noise=bool(flag_bits[1]),
            use_hidden=bool(flag_bits[2]),
        ).randomize(case_rng.derive("forecaster"))
        eps = sample_gumbel_grid(case_rng.derive("noise"), d, K)
        reference, _ = ancestral_sample(model, eps)
        for kind in StrategyKind:
            strategy = make_strategy(
                kind.value,
                forecaster,
                use_reparam_noise=bool(flag_bits[3]),
                share_representation=forecaster.use_hidden,
            )
            buffer, report = predictive_sample(model, strategy, eps)
            position = first_mismatch(buffer.tokens, reference.tokens)
            if position is not None:
                raise ExactnessError(kind.value, case, position)
            _check_accounting(kind.value, case, d, report)
            result.comparisons += 1
        result.cases += 1
    logger.info("一致検証: %d 事例, %d 比較, 不一致 0", result.cases, result.comparisons)
    return result


def noise_path(runs_dir: Path, seed: int, index: int) -> Path:
    """実行記録と同じディレクトリに置くノイズファイルのパス."""
    return runs_dir / f"noise_s{seed}_i{index}.psng"


def load_replay(path: Path) -> tuple[RunRecord, NoiseGrid]:
    """実行記録と、その隣に保存したノイズを読む.

    Raises:
        ArtifactFormatError: ノイズファイルがない、または形状が記録と合わない場合
    """
    record = load_run_record(path)
    grid_path = noise_path(Path(path).parent, record.seed, record.index)
    if not grid_path.exists():
        raise ArtifactFormatError(f"{path}: noise file not found: {grid_path.name}")
    eps = load_noise(grid_path)
    if (eps.d, eps.K) != (record.d, record.K):
        raise ArtifactFormatError(
            f"{grid_path}: noise shape ({eps.d}, {eps.K}) does not match record ({record.d}, {record.K})"
        )
    return record, eps


def replay_record(model: ArmModel, forecaster: Forecaster | None, record: RunRecord, eps: NoiseGrid) -> None:
    """保存したノイズで祖先サンプリングをやり直し、記録のトークン・呼び出し回数と照合する."""
    reference, _ = ancestral_sample(model, eps)
    position = first_mismatch(reference.tokens, record.tokens)
    if position is not None:
        raise ExactnessError(record.strategy, record.seed, position, record.index)
    if record.strategy == "baseline":
        return
    strategy = make_strategy(
        record.strategy,
        forecaster,
        use_reparam_noise=bool(record.flags & 1),
        share_representation=bool(record.flags & 2),
    )
    _, report = predictive_sample(model, strategy, eps)
    if report.arm_calls != record.arm_calls:
        raise SamplerError(
            f"replay of {record.strategy} seed={record.seed}: arm_calls {report.arm_calls} != recorded {record.arm_calls}"
        )


def cmd_verify(config: dict) -> VerifyResult:
    """乱数事例での一致検証と、出力ディレクトリにある実行記録の再生."""
    v = config["verify"]
    result = verify_exactness(
        int(v["cases"]),
        [int(x) for x in v["lengths"]],
        [int(x) for x in v["categories"]],
        Rng(int(v["seed"])),
        hidden=int(v["hidden"]),
        embed=int(v["embed"]),
        layers=int(v["layers"]),
    )
    out_dir = get_output_dir(config)
    records = sorted((out_dir / "runs").glob("*.psrn"))
    if records and (out_dir / CHECKPOINT_NAME).exists():
        model, forecaster = load_checkpoint(out_dir / CHECKPOINT_NAME)
        for path in records:
            replay_record(model, forecaster, *load_replay(path))
            result.replayed += 1
        logger.info("実行記録を再生した: %d 件", result.replayed)
    return result
