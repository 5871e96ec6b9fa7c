"""Desk-scale experiment harness: sweeps, ablations, method tables.

An ExperimentPlan pins one swept axis (backbone, module_count,
gaussian_variance, ablation, or none) plus the shared base configuration.
Every run in a sweep sees the same dataset, the same seeds, and the same
training recipe; only the swept value changes. Results land under
<output_dir>/<plan.name>/ as results.csv + results.json, metric curves, and
per-run directories named <axis>=<value> holding the checkpoint, training
log, per-image scores, and a side-by-side panel figure.

Completed rows are recognized by config hash on rerun and reused without
retraining, so an interrupted sweep picks up where it stopped.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError, NacError
from .imaging import ImageGrid, clip_for_display, load_image
from .metrics import evaluate, score_images
from .models import (
    BACKBONE_DEFAULTS,
    RESERVED_BACKBONES,
    BackboneConfig,
    build_chain,
    save_chain,
)
from .noise import NoiseSpec, corrupt, stream_for
from .pairs import OBSERVED_COPY, PairSet, build_pairs, extract_patches, split
from .phantoms import make_phantoms
from .reporting import emit_report, plot_metric_curve, save_panel_figure
from .training import TrainConfig, train

EXPERIMENT_AXES = ("backbone", "module_count", "gaussian_variance", "ablation", "none")
ABLATION_VARIANTS = ("full", "poisson_only", "gaussian_only", "ndct_base")
SCALES = ("desk", "full")

# Guardrails that keep desk-scale runs desk-sized.
DESK_MAX_PAIRS = 300
DESK_MAX_EPOCHS = 30
DESK_MAX_SIDE = 64

# Published full-scale Mayo reference numbers, quoted as context only.
# These come from runs on the full clinical dataset and are NOT reproduced
# by the desk-scale harness; nothing in this package asserts against them.
REFERENCE_RESULTS = {
    "label": "published full-scale Mayo reference, not reproduced",
    "backbones": {
        "r2unet": {"psnr": 24.547, "ssim": 0.6509},
        "attunet": {"psnr": 24.977, "ssim": 0.6800},
        "r2aunet": {"psnr": 24.559, "ssim": 0.6773},
        "cpce": {"psnr": 24.765, "ssim": 0.6898},
        "resnet": {"psnr": 24.765, "ssim": 0.6697},
        "unet": {"psnr": 27.294, "ssim": 0.6978},
    },
    "ablations": {
        "poisson_only": {"psnr": 23.153, "ssim": 0.5578},
        "gaussian_only": {"psnr": 22.418, "ssim": 0.5233},
        "ndct_base": {"psnr": 27.384, "ssim": 0.6898},
        "full": {"psnr": 27.294, "ssim": 0.6978},
    },
    "methods": {
        "ldct": {"psnr": 21.698, "ssim": 0.4176},
        "bm3d": {"psnr": 22.027, "ssim": 0.5133},
        "noise2void": {"psnr": 25.486, "ssim": 0.6298},
        "neighbor2neighbor": {"psnr": 24.112, "ssim": 0.6363},
        "blind2unblind": {"psnr": 25.818, "ssim": 0.5828},
        "cyclegan": {"psnr": 27.965, "ssim": 0.6926},
        "adn": {"psnr": 27.204, "ssim": 0.5767},
        "dualgan": {"psnr": 24.544, "ssim": 0.5868},
        "ours": {"psnr": 27.294, "ssim": 0.6978},
    },
    "operating_point": {"module_count": 5, "gaussian_variance": 15.0},
}

RESULT_COLUMNS = [
    "experiment", "axis", "value", "status", "backbone", "T",
    "psnr", "ssim", "baseline_psnr", "baseline_ssim", "delta_psnr", "delta_ssim",
    "parameter_count", "epochs", "final_loss", "seconds",
    "flags", "seed", "config_hash", "checkpoint", "notes",
]


@dataclass(frozen=True)
class DataConfig:
    """Where training sources come from and how they are paired."""

    n_sources: int = 12
    image_size: int = 64
    train_fraction: float = 0.75
    copies: int = 2
    mode: str = "n2n_pair"
    group_size: int | None = None
    patch_size: int | None = None
    manifest: str | None = None

    def __post_init__(self):
        if self.manifest is None and self.n_sources < 2:
            raise ConfigError(f"data.n_sources must be >= 2, got {self.n_sources}")
        if self.image_size < 1:
            raise ConfigError(f"data.image_size must be >= 1, got {self.image_size}")
        if self.copies < 1:
            raise ConfigError(f"data.copies must be >= 1, got {self.copies}")

    def to_dict(self) -> dict:
        return {
            "n_sources": self.n_sources,
            "image_size": self.image_size,
            "train_fraction": self.train_fraction,
            "copies": self.copies,
            "mode": self.mode,
            "group_size": self.group_size,
            "patch_size": self.patch_size,
            "manifest": self.manifest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class ExperimentPlan:
    """Externally serializable description of one experiment."""

    name: str
    axis: str = "none"
    axis_values: tuple = ()
    scale: str = "desk"
    output_dir: str = "runs"
    master_seed: int = 0
    chain_length: int = 5
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    model: BackboneConfig = field(default_factory=lambda: BackboneConfig("unet"))
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not self.name or "/" in self.name:
            raise ConfigError(f"experiment.name must be a nonempty path segment, got {self.name!r}")
        if self.axis not in EXPERIMENT_AXES:
            raise ConfigError(f"experiment.axis must be one of {EXPERIMENT_AXES}, got {self.axis!r}")
        if self.scale not in SCALES:
            raise ConfigError(f"experiment.scale must be one of {SCALES}, got {self.scale!r}")
        if self.chain_length < 1:
            raise ConfigError(f"experiment.chain_length must be >= 1, got {self.chain_length}")
        object.__setattr__(self, "axis_values", tuple(self.axis_values))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "axis": self.axis,
            "axis_values": list(self.axis_values),
            "scale": self.scale,
            "output_dir": self.output_dir,
            "master_seed": self.master_seed,
            "chain_length": self.chain_length,
            "data": self.data.to_dict(),
            "noise": self.noise.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        kwargs = dict(d)
        if "data" in kwargs:
            kwargs["data"] = DataConfig.from_dict(kwargs["data"])
        if "noise" in kwargs:
            kwargs["noise"] = NoiseSpec.from_dict(kwargs["noise"])
        if "model" in kwargs:
            kwargs["model"] = BackboneConfig.from_dict(kwargs["model"])
        if "train" in kwargs:
            kwargs["train"] = TrainConfig.from_dict(kwargs["train"])
        if "axis_values" in kwargs:
            kwargs["axis_values"] = tuple(kwargs["axis_values"])
        known = {k: v for k, v in kwargs.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Dataset:
    """Observed (noisy) train/test images plus their clean references."""

    train_observed: list[ImageGrid]
    train_clean: list[ImageGrid]
    test_observed: list[ImageGrid]
    test_clean: list[ImageGrid]

    def summary(self) -> dict:
        return {
            "n_train": len(self.train_observed),
            "n_test": len(self.test_observed),
            "shape": list(self.train_observed[0].shape) if self.train_observed else None,
        }


def load_sources(data: DataConfig, master_seed: int) -> list[ImageGrid]:
    """Clean source images: synthetic phantoms or a manifest of files."""
    if data.manifest is None:
        return make_phantoms(
            data.n_sources, data.image_size, seed=master_seed, group_size=data.group_size
        )
    manifest = json.loads(Path(data.manifest).read_text())
    base = Path(data.manifest).parent
    sources = []
    for entry in manifest["sources"]:
        path = Path(entry["path"])
        if not path.is_absolute():
            path = base / path
        img = load_image(path, id=entry.get("id"))
        if entry.get("group"):
            img = ImageGrid(img.pixels, img.value_range, img.id, entry["group"])
        sources.append(img)
    if not sources:
        raise ConfigError(f"manifest {data.manifest} lists no sources")
    return sources


def build_dataset(data: DataConfig, spec: NoiseSpec, master_seed: int) -> Dataset:
    """Assemble the observed-noisy / clean-reference dataset.

    Sources are clean images. Each gets exactly one observed corruption (the
    reserved copy index) standing in for the low-dose acquisition; training
    never sees the clean train images unless an ablation asks for them.
    """
    sources = load_sources(data, master_seed)
    if data.patch_size is not None:
        patched = []
        for img in sources:
            if img.group is None:
                img = ImageGrid(img.pixels, img.value_range, img.id, img.id)
            patched.extend(extract_patches(img, data.patch_size, data.patch_size))
        sources = patched
    by_id = {img.id: img for img in sources}
    train_ids, test_ids = split(sources, data.train_fraction, master_seed)
    # The observed image stands in for a stored acquisition, so it is clipped
    # into the declared range; later pair corruptions stay unclipped.
    observed = {
        img.id: clip_for_display(
            corrupt(img, spec, stream_for(master_seed, img.id, OBSERVED_COPY))
        )
        for img in sources
    }
    return Dataset(
        train_observed=[observed[i] for i in train_ids],
        train_clean=[by_id[i] for i in train_ids],
        test_observed=[observed[i] for i in test_ids],
        test_clean=[by_id[i] for i in test_ids],
    )


def _check_desk_limits(plan: ExperimentPlan, pairset: PairSet) -> None:
    if plan.scale != "desk":
        return
    if plan.train.epochs > DESK_MAX_EPOCHS:
        raise ConfigError(
            f"train.epochs {plan.train.epochs} exceeds the desk-scale cap of {DESK_MAX_EPOCHS}; "
            "set experiment.scale to 'full' to lift it"
        )
    if len(pairset) > DESK_MAX_PAIRS:
        raise ConfigError(
            f"{len(pairset)} training pairs exceed the desk-scale cap of {DESK_MAX_PAIRS}; "
            "set experiment.scale to 'full' to lift it"
        )
    h, w = pairset.sources[0].shape
    if max(h, w) > DESK_MAX_SIDE:
        raise ConfigError(
            f"source images of {h}x{w} exceed the desk-scale cap of {DESK_MAX_SIDE}; "
            "set data.patch_size or experiment.scale to 'full'"
        )


def _config_hash(payload: dict) -> str:
    encoded = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(encoded).hexdigest()[:12]


def _value_slug(value) -> str:
    if isinstance(value, float) and value == int(value):
        return str(int(value))
    return str(value)


def _load_completed(results_path: Path) -> dict[str, dict]:
    if not results_path.exists():
        return {}
    try:
        data = json.loads(results_path.read_text())
    except json.JSONDecodeError:
        return {}
    return {
        row["config_hash"]: row
        for row in data.get("rows", [])
        if row.get("status") == "ok" and row.get("config_hash")
    }


def _blank_row(plan: ExperimentPlan, value, backbone: str, T: int) -> dict:
    return {
        "experiment": plan.name,
        "axis": plan.axis,
        "value": _value_slug(value),
        "status": "ok",
        "backbone": backbone,
        "T": T,
        "psnr": None,
        "ssim": None,
        "baseline_psnr": None,
        "baseline_ssim": None,
        "delta_psnr": None,
        "delta_ssim": None,
        "parameter_count": None,
        "epochs": plan.train.epochs,
        "final_loss": None,
        "seconds": None,
        "flags": "",
        "seed": plan.master_seed,
        "config_hash": "",
        "checkpoint": "",
        "notes": "",
    }


def _run_single(
    plan: ExperimentPlan,
    value,
    backbone_cfg: BackboneConfig,
    T: int,
    pair_spec: NoiseSpec,
    pair_sources: list[ImageGrid],
    dataset: Dataset,
    completed: dict[str, dict],
    flags: str = "",
    notes: str = "",
) -> dict:
    """Train and score one sweep point, or reuse its cached row."""
    row = _blank_row(plan, value, backbone_cfg.name, T)
    row["flags"] = flags
    row["notes"] = notes
    row["config_hash"] = _config_hash(
        {
            "experiment": plan.name,
            "axis": plan.axis,
            "value": _value_slug(value),
            "backbone": backbone_cfg.to_dict(),
            "T": T,
            "noise": pair_spec.to_dict(),
            "train": plan.train.to_dict(),
            "data": plan.data.to_dict(),
            "seed": plan.master_seed,
        }
    )
    if row["config_hash"] in completed:
        return completed[row["config_hash"]]

    run_dir = Path(plan.output_dir) / plan.name / f"{plan.axis}={_value_slug(value)}"
    run_dir.mkdir(parents=True, exist_ok=True)

    pairset = build_pairs(
        pair_sources, pair_spec, copies=plan.data.copies, mode=plan.data.mode,
        master_seed=plan.master_seed,
    )
    _check_desk_limits(plan, pairset)

    t0 = time.monotonic()
    chain = build_chain(backbone_cfg, T, init_seed=plan.master_seed)
    log_path = run_dir / "train_log.csv"
    log_path.unlink(missing_ok=True)
    result = train(chain, pairset, plan.train, log_path=log_path, checkpoint_dir=run_dir)
    ckpt_path = run_dir / "model.ckpt"
    save_chain(chain, ckpt_path, training_step=len(result.history))

    report = evaluate(chain, dataset.test_observed, dataset.test_clean)
    report.to_csv(run_dir / "per_image.csv")
    report.to_json(run_dir / "per_image.json")

    inp, ref = dataset.test_observed[0], dataset.test_clean[0]
    from .models import apply_chain

    out, _ = apply_chain(chain, inp)
    agg = report.aggregate
    save_panel_figure(
        run_dir / "panels.png",
        [
            (f"input {agg['baseline_psnr_mean']:.2f} dB", inp),
            (f"denoised {agg['psnr_mean']:.2f} dB", out),
            ("reference", ref),
        ],
        title=f"{plan.name}: {plan.axis}={_value_slug(value)}",
    )

    row.update(
        {
            "psnr": agg["psnr_mean"],
            "ssim": agg["ssim_mean"],
            "baseline_psnr": agg["baseline_psnr_mean"],
            "baseline_ssim": agg["baseline_ssim_mean"],
            "delta_psnr": agg["psnr_mean"] - agg["baseline_psnr_mean"],
            "delta_ssim": agg["ssim_mean"] - agg["baseline_ssim_mean"],
            "parameter_count": chain.parameter_count(),
            "final_loss": result.history[-1]["loss"] if result.history else None,
            "seconds": round(time.monotonic() - t0, 3),
            "checkpoint": str(ckpt_path),
        }
    )
    return row


def _emit_results(plan: ExperimentPlan, rows: list[dict], metadata: dict | None = None) -> dict:
    out_dir = Path(plan.output_dir) / plan.name
    meta = {
        "plan": plan.to_dict(),
        "reference": REFERENCE_RESULTS,
    }
    if metadata:
        meta.update(metadata)
    paths = emit_report("results", rows, out_dir, columns=RESULT_COLUMNS, metadata=meta)

    ok_rows = [r for r in rows if r.get("status") == "ok" and r.get("psnr") is not None]
    if len(ok_rows) >= 2 and plan.axis != "none":
        if plan.axis in ("module_count", "gaussian_variance"):
            xs = [float(r["value"]) for r in ok_rows]
            ticklabels = None
        else:
            xs = list(range(len(ok_rows)))
            ticklabels = [r["value"] for r in ok_rows]
        for metric in ("psnr", "ssim"):
            plot_metric_curve(
                out_dir / f"{metric}_vs_{plan.axis}.png",
                xs,
                {
                    "denoised": [r[metric] for r in ok_rows],
                    "noisy input": [r[f"baseline_{metric}"] for r in ok_rows],
                },
                plan.axis,
                metric.upper(),
                title=plan.name,
                x_ticklabels=ticklabels,
            )
        paths["figures"] = str(out_dir)
    return {"rows": rows, "paths": paths}


def sweep_backbones(plan: ExperimentPlan, dataset: Dataset | None = None) -> dict:
    """One training run per backbone name; reserved names yield a marked
    'unavailable' row instead of aborting the sweep."""
    values = list(plan.axis_values) or list(BACKBONE_DEFAULTS)
    if not values:
        raise ConfigError("backbone sweep needs at least one backbone name")
    for name in values:
        if name not in BACKBONE_DEFAULTS and name not in RESERVED_BACKBONES:
            raise ConfigError(f"backbone sweep value '{name}' is not in the registry")
    dataset = dataset or build_dataset(plan.data, plan.noise, plan.master_seed)
    completed = _load_completed(Path(plan.output_dir) / plan.name / "results.json")
    rows = []
    for name in values:
        if name in RESERVED_BACKBONES:
            row = _blank_row(plan, name, name, plan.chain_length)
            row["status"] = "unavailable"
            row["notes"] = "reserved backbone; registered but not implemented"
            rows.append(row)
            continue
        cfg = replace(plan.model, name=name)
        rows.append(
            _run_single(
                plan, name, cfg, plan.chain_length, plan.noise,
                dataset.train_observed, dataset, completed,
            )
        )
    return _emit_results(plan, rows)


def sweep_module_count(plan: ExperimentPlan, dataset: Dataset | None = None) -> dict:
    """Metric curve over the number of chained module applications T."""
    values = [int(v) for v in (plan.axis_values or (1, 3, 5, 7))]
    if not values:
        raise ConfigError("module-count sweep needs at least one T value")
    if any(v < 1 for v in values):
        raise ConfigError(f"module counts must be >= 1, got {values}")
    dataset = dataset or build_dataset(plan.data, plan.noise, plan.master_seed)
    completed = _load_completed(Path(plan.output_dir) / plan.name / "results.json")
    rows = []
    for T in values:
        rows.append(
            _run_single(
                plan, T, plan.model, T, plan.noise,
                dataset.train_observed, dataset, completed,
            )
        )
    counts = {r["parameter_count"] for r in rows if r["parameter_count"] is not None}
    if len(counts) > 1:
        raise NacError(
            f"parameter count should not depend on T; saw {sorted(counts)}"
        )
    return _emit_results(plan, rows)


def sweep_noise_variance(plan: ExperimentPlan, dataset: Dataset | None = None) -> dict:
    """Sweep the Gaussian variance of the pair corruption, observed images
    held fixed. Variance is declared on the 8-bit scale."""
    values = [float(v) for v in plan.axis_values]
    if not values:
        raise ConfigError("variance sweep needs at least one variance value")
    for v in values:
        if v < 0:
            raise ConfigError(f"gaussian variance must be >= 0, got {v}")
    dataset = dataset or build_dataset(plan.data, plan.noise, plan.master_seed)
    completed = _load_completed(Path(plan.output_dir) / plan.name / "results.json")
    rows = []
    for v in values:
        spec = replace(plan.noise, gaussian_variance=v)
        flags = ""
        if not spec.poisson_enabled and v == 0:
            flags = "noise_free"
        rows.append(
            _run_single(
                plan, v, plan.model, plan.chain_length, spec,
                dataset.train_observed, dataset, completed, flags=flags,
                notes="pairs carry no corruption; training degenerates to identity"
                if flags else "",
            )
        )
    return _emit_results(plan, rows)


def run_ablations(plan: ExperimentPlan, dataset: Dataset | None = None) -> dict:
    """Noise-component and pairing-base ablations.

    poisson_only / gaussian_only drop one corruption component from the
    training pairs; ndct_base builds pairs from the clean references instead
    of the observed images (skipped with a notice when no clean references
    exist); full is the complete method.
    """
    values = list(plan.axis_values) or list(ABLATION_VARIANTS)
    for v in values:
        if v not in ABLATION_VARIANTS:
            raise ConfigError(
                f"unknown ablation variant '{v}'; expected one of {ABLATION_VARIANTS}"
            )
    dataset = dataset or build_dataset(plan.data, plan.noise, plan.master_seed)
    completed = _load_completed(Path(plan.output_dir) / plan.name / "results.json")
    rows = []
    for variant in values:
        spec = plan.noise
        sources = dataset.train_observed
        notes = ""
        if variant == "poisson_only":
            spec = replace(plan.noise, gaussian_variance=0.0)
        elif variant == "gaussian_only":
            spec = replace(plan.noise, poisson_scale=None)
        elif variant == "ndct_base":
            if not dataset.train_clean:
                row = _blank_row(plan, variant, plan.model.name, plan.chain_length)
                row["status"] = "skipped"
                row["notes"] = "no clean references available for the clean-base variant"
                rows.append(row)
                continue
            sources = dataset.train_clean
            notes = "pairs corrupted from clean references instead of observed images"
        rows.append(
            _run_single(
                plan, variant, plan.model, plan.chain_length, spec,
                sources, dataset, completed, notes=notes,
            )
        )
    return _emit_results(plan, rows)


def run_plan(plan: ExperimentPlan, dataset: Dataset | None = None) -> dict:
    """Dispatch a plan to the runner for its axis."""
    if plan.axis == "backbone":
        return sweep_backbones(plan, dataset)
    if plan.axis == "module_count":
        return sweep_module_count(plan, dataset)
    if plan.axis == "gaussian_variance":
        return sweep_noise_variance(plan, dataset)
    if plan.axis == "ablation":
        return run_ablations(plan, dataset)
    dataset = dataset or build_dataset(plan.data, plan.noise, plan.master_seed)
    completed = _load_completed(Path(plan.output_dir) / plan.name / "results.json")
    row = _run_single(
        plan, "base", plan.model, plan.chain_length, plan.noise,
        dataset.train_observed, dataset, completed,
    )
    return _emit_results(plan, [row])


def tabulate_methods(
    references: list[ImageGrid],
    inputs: list[ImageGrid],
    ours: list[ImageGrid] | None,
    external_dirs: dict[str, str] | None,
    out_dir,
    name: str = "methods",
) -> dict:
    """Method comparison table over a shared test set.

    The noisy inputs themselves form the first row. Each external directory
    must hold one image per reference id (any loadable format); a method
    with missing or unreadable entries gets an error row while the rest of
    the table is still produced. `ours` holds this package's outputs.
    """
    if not references:
        raise ConfigError("method table needs at least one reference image")
    if len(inputs) != len(references):
        raise ConfigError(
            f"got {len(inputs)} inputs but {len(references)} references"
        )
    rows = []

    def scored_row(method: str, outputs: list[ImageGrid]) -> dict:
        report = score_images(outputs, inputs, references)
        return {
            "method": method,
            "status": "ok",
            "psnr": report.aggregate["psnr_mean"],
            "ssim": report.aggregate["ssim_mean"],
            "n_images": len(outputs),
            "notes": "",
        }

    rows.append(scored_row("noisy input", [img for img in inputs]))

    for method in sorted(external_dirs or {}):
        directory = Path(external_dirs[method])
        outputs = []
        problem = None
        for ref in references:
            candidates = sorted(directory.glob(f"{ref.id}.*")) if directory.is_dir() else []
            if not candidates:
                problem = f"missing output for id '{ref.id}' in {directory}"
                break
            try:
                img = load_image(candidates[0], id=ref.id)
            except NacError as exc:
                problem = f"unreadable output for id '{ref.id}': {exc}"
                break
            if img.shape != ref.shape:
                problem = (
                    f"output for id '{ref.id}' has shape {img.shape}, expected {ref.shape}"
                )
                break
            from .imaging import normalize

            outputs.append(normalize(img))
        if problem is not None:
            rows.append(
                {
                    "method": method,
                    "status": "incomplete",
                    "psnr": None,
                    "ssim": None,
                    "n_images": len(outputs),
                    "notes": problem,
                }
            )
        else:
            rows.append(scored_row(method, outputs))

    if ours is not None:
        rows.append(scored_row("ours", ours))

    return {
        "rows": rows,
        "paths": emit_report(
            name,
            rows,
            out_dir,
            columns=["method", "status", "psnr", "ssim", "n_images", "notes"],
            metadata={"reference": REFERENCE_RESULTS},
        ),
    }
