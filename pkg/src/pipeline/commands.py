import logging
from pathlib import Path
from typing import Optional

import numpy as np

from src.distill.distiller import DistillConfig, DistilledDataset, DistillMode, distill_dataset
from src.errors import ConfigError
from src.nn.checkpoint import load_checkpoint, load_model, save_model
from src.nn.data import LabeledImages, load_dataset
from src.nn.models import ArchConfig, ModelGraph, build_model, load_arch, model_hash
from src.nn.training import TrainConfig, evaluate, pretrain_with_history
from src.quant.qmodel import QuantVariant, load_quantized, save_quantized
from src.quant.reconstruct import quantize_model

from .artifacts import PhaseTimer, hash_artifacts, write_csv, write_json, write_trace_csv
from .config import RunConfig
from .report import AblationRow, BlockMSE, Report

logger = logging.getLogger(__name__)

MODEL_FILE = "model.genz"
QUANTIZED_FILE = "quantized.genz"

# label -> (data mode, swing, quantizer variant)
ABLATION_ROWS: dict[str, tuple[DistillMode, bool, QuantVariant]] = {
    "M1": (DistillMode.ZEROQ, False, QuantVariant.FROZEN),
    "M2": (DistillMode.ZEROQ, False, QuantVariant.GENIE),
    "M3": (DistillMode.ZEROQ, True, QuantVariant.FROZEN),
    "M4": (DistillMode.GBA, False, QuantVariant.FROZEN),
    "M5": (DistillMode.GENIE, False, QuantVariant.FROZEN),
    "M6": (DistillMode.GENIE, True, QuantVariant.FROZEN),
    "M7": (DistillMode.GENIE, True, QuantVariant.GENIE),
}


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_echo(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json", by_alias=True)


def _eval_set(cfg: RunConfig, arch: ArchConfig, dataset_id: Optional[str] = None) -> LabeledImages:
    return load_dataset(dataset_id or cfg.eval_dataset, cfg.eval_samples, arch.input_size, arch.in_channels)


def _write_report(path: Path, report: Report) -> Path:
    return write_json(path, report.model_dump(mode="json"))


def cmd_pretrain(cfg: RunConfig) -> Path:
    """Train the desk model and write ``model.genz`` plus a loss CSV and report."""
    out = _out_dir(cfg)
    timer = PhaseTimer()
    with timer.phase("build"):
        arch = load_arch(cfg.arch).model_copy(update={"seed": cfg.seed})
        model = build_model(arch)
        train = load_dataset("desk-train", cfg.pretrain.train_samples, arch.input_size, arch.in_channels)
        test = _eval_set(cfg, arch)
    train_cfg = TrainConfig(**cfg.pretrain.model_dump(exclude={"train_samples", "seed"}), seed=cfg.seed)
    with timer.phase("pretrain"):
        model, history = pretrain_with_history(model, train, train_cfg)
    with timer.phase("eval"):
        accuracy = evaluate(model, test)
    logger.info(f"FP32 accuracy on {cfg.eval_dataset}: {accuracy:.2f}%")
    
    model_path = save_model(model, out / MODEL_FILE, {"fp32_accuracy": accuracy})
    loss_path = write_csv(out / "pretrain_loss.csv", ("step", "loss"), enumerate(history.losses))
    report = Report(
        command="pretrain",
        config=_config_echo(cfg),
        seed=cfg.seed,
        fp32_accuracy=accuracy,
        wall_clock=timer.phases,
        artifacts=hash_artifacts([model_path, loss_path]),
    )
    _write_report(out / "pretrain_report.json", report)
    return model_path


def cmd_distill(cfg: RunConfig, model_path: Path | str) -> tuple[Path, Path]:
    """Distill calibration images; returns (dataset file, BNS loss trace CSV)."""
    out = _out_dir(cfg)
    timer = PhaseTimer()
    model = load_model(model_path)
    distill_cfg = cfg.distill_config()
    with timer.phase("distill"):
        dataset = distill_dataset(
            model,
            cfg.distill.num_images,
            cfg.distill.batch_size,
            cfg.distill.iters,
            cfg.seed,
            distill_cfg,
        )
    tag = f"{distill_cfg.mode.value}{'' if distill_cfg.swing else '_noswing'}"
    data_path = dataset.save(out / f"distilled_{tag}.genz")
    trace_path = write_trace_csv(out / f"bns_trace_{tag}.csv", dataset.trace_rows())
    report = Report(
        command="distill",
        config=_config_echo(cfg),
        seed=cfg.seed,
        bns_loss_initial=[t[0] for t in dataset.traces if t],
        bns_loss_final=[t[-1] for t in dataset.traces if t],
        wall_clock=timer.phases,
        artifacts=hash_artifacts([data_path, trace_path]),
    )
    _write_report(out / f"distill_report_{tag}.json", report)
    return data_path, trace_path


def cmd_quantize(cfg: RunConfig, model_path: Path | str, dataset_path: Path | str) -> tuple[Path, Report]:
    """Reconstruct, finalize and save the quantized model; report soft and hard accuracy."""
    out = _out_dir(cfg)
    timer = PhaseTimer()
    teacher = load_model(model_path)
    calib = DistilledDataset.load(dataset_path)
    test = _eval_set(cfg, teacher.arch)
    recon = cfg.recon_config()
    
    with timer.phase("fp32_eval"):
        fp_acc = evaluate(teacher, test)
    with timer.phase("reconstruct"):
        qm, blocks = quantize_model(teacher, calib, recon)
    with timer.phase("quant_eval"):
        soft_acc = evaluate(qm, test)
        binarized = qm.binarized_fraction()
        qm.finalize()
        hard_acc = evaluate(qm, test)
    logger.info(f"W{recon.bits_w}A{recon.bits_a}: FP32 {fp_acc:.2f}%, soft {soft_acc:.2f}%, hardened {hard_acc:.2f}%")
    
    q_path = save_quantized(qm, out / QUANTIZED_FILE, {"seed": cfg.seed, "model_hash": model_hash(teacher)})
    report = Report(
        command="quantize",
        config=_config_echo(cfg),
        seed=cfg.seed,
        fp32_accuracy=fp_acc,
        quant_accuracy_soft=soft_acc,
        quant_accuracy_hard=hard_acc,
        block_mse=[BlockMSE(block=b.block, mse_before=b.mse_before, mse_after=b.mse_after, binarized=b.binarized) for b in blocks],
        bns_loss_final=[t[-1] for t in calib.traces if t],
        hV_binarization=binarized,
        wall_clock=timer.phases,
        artifacts=hash_artifacts([q_path]),
    )
    _write_report(out / "quantize_report.json", report)
    return q_path, report


def cmd_eval(
    model_path: Path | str,
    dataset_id: str = "desk-test",
    num_samples: Optional[int] = None
) -> float:
    """Top-1 accuracy of a float or quantized checkpoint."""
    kind = load_checkpoint(model_path).metadata.get("kind")
    if kind == "model":
        model = load_model(model_path)
    elif kind == "quantized":
        model = load_quantized(model_path)
    else:
        raise ConfigError(f"{model_path} holds a {kind!r} artifact, not a model")
    arch = model.arch
    dataset = load_dataset(dataset_id, num_samples, arch.input_size, arch.in_channels)
    accuracy = evaluate(model, dataset)
    logger.info(f"{model_path} on {dataset_id}: {accuracy:.2f}%")
    return accuracy


def spearman(x: list[float], y: list[float]) -> float:
    """Rank correlation; 0.0 when either side is constant."""
    if len(x) < 2:
        return 0.0
    rx = np.argsort(np.argsort(x)).astype(np.float64)
    ry = np.argsort(np.argsort(y)).astype(np.float64)
    if rx.std() == 0 or ry.std() == 0 or np.ptp(y) == 0:
        return 0.0
    return float(np.corrcoef(rx, ry)[0, 1])


class _AblationRunner:
    
    def __init__(self, cfg: RunConfig, teacher: ModelGraph, test: LabeledImages):
        self.cfg = cfg
        self.teacher = teacher
        self.test = test
        self._datasets: dict[tuple, DistilledDataset] = {}
        
    def dataset(self, mode: DistillMode, swing: bool, num_images: int, seed: int) -> DistilledDataset:
        key = (mode, swing, num_images, seed)
        if key not in self._datasets:
            batch = min(self.cfg.distill.batch_size, num_images)
            if num_images % batch:
                raise ConfigError(f"num_images {num_images} is not a multiple of batch size {batch}")
            self._datasets[key] = distill_dataset(
                self.teacher, num_images, batch, self.cfg.distill.iters, seed,
                DistillConfig(mode=mode, swing=swing),
            )
        return self._datasets[key]
    
    def run(
        self,
        label: str,
        mode: DistillMode,
        swing: bool,
        variant: QuantVariant,
        num_images: int,
        p_ord: float,
        seed: int
    ) -> AblationRow:
        calib = self.dataset(mode, swing, num_images, seed)
        recon = self.cfg.recon_config(variant=variant, p_ord=p_ord, seed=seed)
        qm, _ = quantize_model(self.teacher, calib, recon)
        accuracy = evaluate(qm.finalize(), self.test)
        logger.info(f"{label} seed {seed}: {mode.value} (swing={swing}) + {variant.value}, n={num_images}, p={p_ord}: {accuracy:.2f}%")
        return AblationRow(
            label=label, data_mode=mode.value, swing=swing, variant=variant.value,
            num_images=num_images, p_ord=p_ord, seed=seed, accuracy=accuracy,
        )


def cmd_ablate(cfg: RunConfig, model_path: Path | str) -> Path:
    """Run the ablation matrix, the num_images sweep and the p_ord sweep; write JSON + CSV."""
    out = _out_dir(cfg)
    timer = PhaseTimer()
    teacher = load_model(model_path)
    test = _eval_set(cfg, teacher.arch)
    runner = _AblationRunner(cfg, teacher, test)
    base_n = cfg.distill.num_images
    base_p = cfg.quant.init_norm
    unknown = [label for label in cfg.ablation.rows if label not in ABLATION_ROWS]
    if unknown:
        raise ConfigError(f"Unknown ablation rows: {unknown}")
    
    rows: list[AblationRow] = []
    with timer.phase("matrix"):
        for seed in cfg.ablation.seeds:
            for label in cfg.ablation.rows:
                mode, swing, variant = ABLATION_ROWS[label]
                rows.append(runner.run(label, mode, swing, variant, base_n, base_p, seed))
    with timer.phase("num_images_sweep"):
        for seed in cfg.ablation.seeds:
            for n in cfg.ablation.num_images_sweep:
                rows.append(runner.run(f"n={n}", DistillMode.GENIE, True, QuantVariant.GENIE, n, base_p, seed))
    with timer.phase("p_ord_sweep"):
        for seed in cfg.ablation.seeds:
            for variant in (QuantVariant.GENIE, QuantVariant.FROZEN):
                for p_ord in cfg.ablation.p_ord_sweep:
                    rows.append(runner.run(f"p={p_ord}/{variant.value}", DistillMode.GENIE, True, variant, base_n, p_ord, seed))
                    
    stats: dict[str, float] = {}
    for label in cfg.ablation.rows:
        accs = [r.accuracy for r in rows if r.label == label]
        stats[f"{label}_mean"] = round(float(np.mean(accs)), 2)
    sweep = [r for r in rows if r.label.startswith("n=")]
    if sweep:
        sizes = sorted({r.num_images for r in sweep})
        means = [float(np.mean([r.accuracy for r in sweep if r.num_images == n])) for n in sizes]
        stats["num_images_spearman"] = spearman([float(n) for n in sizes], means)
    for variant in (QuantVariant.GENIE, QuantVariant.FROZEN):
        accs = [
            float(np.mean([r.accuracy for r in rows if r.label == f"p={p}/{variant.value}"]))
            for p in cfg.ablation.p_ord_sweep
        ]
        if accs:
            stats[f"p_ord_spread_{variant.value}"] = round(max(accs) - min(accs), 2)
            
    csv_path = write_csv(
        out / "ablation.csv",
        ("label", "data_mode", "swing", "variant", "num_images", "p_ord", "seed", "accuracy"),
        ((r.label, r.data_mode, r.swing, r.variant, r.num_images, r.p_ord, r.seed, r.accuracy) for r in rows),
    )
    report = Report(
        command="ablate",
        config=_config_echo(cfg),
        seed=cfg.seed,
        fp32_accuracy=evaluate(teacher, test),
        ablation=rows,
        statistics=stats,
        wall_clock=timer.phases,
        artifacts=hash_artifacts([csv_path]),
    )
    return _write_report(out / "ablation.json", report)
