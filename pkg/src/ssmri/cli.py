"""Command-line experiment runner.

Every verb reads one JSON experiment spec (``--spec``) and works inside its
output directory::

    <out>/data/{train,val,test}/   manifest.json + <id>.cim
    <out>/masks/acquisition.msk    plus acquisition.json (kind, rate, center, seed)
    <out>/params.bin               trained network (params_2.bin for the second parallel net)
    <out>/report.json              training report; timing.json holds wall-clock
    <out>/ssdu_init/               SSDU pretraining used to start siamrecon
    <out>/recon/                   test reconstructions as CIM1 files
    <out>/eval/                    metrics.csv and errmap_<id>.png
    <out>/ablation/                ablation.csv and one report per grid point
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentSpec, SchemaError, parse_override, set_dotted
from .errors import FormatError, SolverError, TrainingError, ValidationError
from .kspace import SamplingMask, load_mask, make_mask, save_mask
from .metrics import (
    MetricRecord,
    error_map,
    evaluate_pair,
    mean_psnr,
    save_error_map,
    write_metrics_csv,
)
from .phantom import Dataset, gen_ellipse_phantom, item_seed, load_dataset, save_dataset
from .reconnet import ReconNet, load_params, save_params
from . import selfsup

log = logging.getLogger("ssmri")

VERBS = ("gen-data", "gen-mask", "train", "recon", "eval", "ablate")


class ArtifactError(RuntimeError):
    """A prerequisite file from an earlier step is missing."""


# --- spec handling --------------------------------------------------------


def load_spec(path: str | None, overrides=(), seed: int | None = None, out: str | None = None) -> ExperimentSpec:
    if path is None:
        data = ExperimentSpec().to_dict()
    else:
        p = Path(path)
        if not p.exists():
            raise ArtifactError(f"spec file {p} not found")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{p}: invalid JSON ({exc})") from exc
        base = ExperimentSpec().to_dict()
        _merge(base, data)
        data = base
    for text in overrides:
        key, value = parse_override(text)
        set_dotted(data, key, value)
    if seed is not None:
        data["train"]["seed"] = seed
    if out is not None:
        data["output_dir"] = out
    # the acquisition block is the single source for the training mask
    data["train"]["mask_spec"] = dict(data["acquisition"])
    return ExperimentSpec.from_dict(data)


def _merge(base: dict, extra):
    if not isinstance(extra, dict):
        raise SchemaError("schema error at <root>: spec must be a JSON object")
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


class Layout:
    def __init__(self, spec: ExperimentSpec):
        self.root = Path(spec.output_dir)

    def data(self, split: str) -> Path:
        return self.root / "data" / split

    mask = property(lambda self: self.root / "masks" / "acquisition.msk")
    mask_meta = property(lambda self: self.root / "masks" / "acquisition.json")
    params = property(lambda self: self.root / "params.bin")
    params2 = property(lambda self: self.root / "params_2.bin")
    report = property(lambda self: self.root / "report.json")
    timing = property(lambda self: self.root / "timing.json")
    ssdu_dir = property(lambda self: self.root / "ssdu_init")
    recon = property(lambda self: self.root / "recon")
    eval_dir = property(lambda self: self.root / "eval")
    ablation = property(lambda self: self.root / "ablation")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ArtifactError(f"missing {path}; {hint}")
    return path


def _split_sizes(spec: ExperimentSpec) -> dict[str, tuple[int, int]]:
    d = spec.dataset
    n_train = d.count - d.n_val - d.n_test
    bounds = {"train": (0, n_train), "val": (n_train, n_train + d.n_val), "test": (n_train + d.n_val, d.count)}
    return {k: v for k, v in bounds.items() if v[1] > v[0]}


def build_splits(spec: ExperimentSpec) -> dict[str, Dataset]:
    d = spec.dataset
    out = {}
    for split, (lo, hi) in _split_sizes(spec).items():
        items = [
            (f"{split}_{i:04d}", gen_ellipse_phantom(d.H, d.W, d.n_ellipses, item_seed(d.seed, i)))
            for i in range(lo, hi)
        ]
        out[split] = Dataset(items, split)
    return out


def _load_split(lay: Layout, split: str) -> Dataset:
    _require(lay.data(split) / "manifest.json", "run `ssmri gen-data` first")
    return load_dataset(lay.data(split))


def _maybe_split(lay: Layout, split: str) -> Dataset | None:
    return load_dataset(lay.data(split)) if (lay.data(split) / "manifest.json").exists() else None


def _load_acquisition(spec: ExperimentSpec, lay: Layout) -> SamplingMask:
    _require(lay.mask, "run `ssmri gen-mask` first")
    meta = json.loads(_require(lay.mask_meta, "run `ssmri gen-mask` first").read_text())
    omega = load_mask(lay.mask, center_size=meta["center_size"])
    a = spec.acquisition
    expect = make_mask(a.kind, spec.dataset.H, spec.dataset.W, a.rate, a.center_size, a.seed)
    if omega != expect:
        raise ArtifactError(f"{lay.mask} does not match the spec's acquisition block; rerun `ssmri gen-mask`")
    return omega


# --- verbs ----------------------------------------------------------------


def cmd_gen_data(spec: ExperimentSpec) -> None:
    lay = Layout(spec)
    for split, ds in build_splits(spec).items():
        save_dataset(ds, lay.data(split))
        log.info("wrote %d %s items to %s", len(ds), split, lay.data(split))


def cmd_gen_mask(spec: ExperimentSpec) -> None:
    lay = Layout(spec)
    a = spec.acquisition
    omega = make_mask(a.kind, spec.dataset.H, spec.dataset.W, a.rate, a.center_size, a.seed)
    lay.mask.parent.mkdir(parents=True, exist_ok=True)
    save_mask(omega, lay.mask)
    meta = {"kind": omega.kind, "rate": omega.rate, "center_size": omega.center_size, "seed": omega.seed}
    lay.mask_meta.write_text(json.dumps(meta, indent=2) + "\n")
    log.info("wrote %s (%d samples)", lay.mask, omega.count)


def _write_report(report: selfsup.TrainReport, directory: Path, params_name: str = "params.bin") -> None:
    report.params_path = params_name
    d = report.to_dict()
    wall = d.pop("wall_clock_s")
    (directory / "report.json").write_text(json.dumps(d, indent=2) + "\n")
    (directory / "timing.json").write_text(json.dumps({"wall_clock_s": wall}, indent=2) + "\n")


def _ssdu_init(spec: ExperimentSpec, lay: Layout, train: Dataset, val: Dataset | None) -> ReconNet:
    """The siamrecon starting point: ``init_params`` if given, else a cached SSDU run."""
    if spec.init_params:
        return load_params(_require(Path(spec.init_params), "fix init_params in the spec"))
    cached = lay.ssdu_dir / "params.bin"
    cfg = spec.train.replace(strategy="ssdu", **_clear_ablations())
    cfg_path = lay.ssdu_dir / "train_config.json"
    key = {"train": cfg.to_dict(), "dataset": spec.to_dict()["dataset"]}
    if cached.exists() and cfg_path.exists() and json.loads(cfg_path.read_text()) == key:
        return load_params(cached)
    log.info("pretraining SSDU initialization")
    net, report = selfsup.train_ssdu(train, cfg, val)
    lay.ssdu_dir.mkdir(parents=True, exist_ok=True)
    save_params(net, cached)
    _write_report(report, lay.ssdu_dir)
    cfg_path.write_text(json.dumps(key, indent=2) + "\n")
    return net


def _clear_ablations() -> dict:
    return {f"ablations.{k}": False for k in ("no_resampling", "fixed_resample_mask", "no_stop_gradient", "no_param_replacement")}


def cmd_train(spec: ExperimentSpec) -> selfsup.TrainReport:
    lay = Layout(spec)
    train = _load_split(lay, "train")
    _load_acquisition(spec, lay)
    val = _maybe_split(lay, "val")
    cfg = spec.train
    init = _ssdu_init(spec, lay, train, val) if cfg.strategy == "siamrecon" else None
    nets, report = selfsup.train(train, cfg, val, init)
    lay.root.mkdir(parents=True, exist_ok=True)
    save_params(nets[0], lay.params)
    if len(nets) > 1:
        save_params(nets[1], lay.params2)
    _write_report(report, lay.root)
    log.info("trained %s, final loss %.6g", cfg.strategy, report.loss_curve[-1])
    return report


def cmd_recon(spec: ExperimentSpec) -> None:
    lay = Layout(spec)
    test = _load_split(lay, "test")
    omega = _load_acquisition(spec, lay)
    net = load_params(_require(lay.params, "run `ssmri train` first"))
    preds = selfsup.reconstruct_dataset(net, test, omega)
    save_dataset(Dataset(list(zip(test.ids, preds)), "test"), lay.recon)
    log.info("wrote %d reconstructions to %s", len(preds), lay.recon)


def cmd_eval(spec: ExperimentSpec, pred_dir: str | None = None) -> list[MetricRecord]:
    """Score reconstructions against ground truth.

    ``pred_dir`` points at any dataset directory to score instead of the
    ``recon`` step's output; zero-filled rows are always included.
    """
    lay = Layout(spec)
    test = _load_split(lay, "test")
    omega = _load_acquisition(spec, lay)
    if pred_dir is None:
        _require(lay.params, "run `ssmri train` first")
        _require(lay.recon / "manifest.json", "run `ssmri recon` first")
        source, method = lay.recon, spec.train.strategy
    else:
        source, method = Path(pred_dir), "pred"
        _require(source / "manifest.json", "--pred must name a directory written by gen-data or recon")
    preds = load_dataset(source)
    by_id = dict(preds.items)
    missing = [i for i in test.ids if i not in by_id]
    if missing:
        raise ArtifactError(f"{source} has no reconstruction for {missing[0]}")
    windowed = spec.eval.windowed_ssim
    lay.eval_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for (item_id, gt), zf in zip(test.items, selfsup.zero_filled(test, omega)):
        pred = by_id[item_id]
        records.append(evaluate_pair(item_id, method, pred, gt, windowed))
        records.append(evaluate_pair(item_id, "zero_filled", zf, gt, windowed))
        save_error_map(error_map(pred, gt), lay.eval_dir / f"errmap_{item_id}.png")
    write_metrics_csv(records, lay.eval_dir / "metrics.csv")
    log.info("%s mean PSNR %.3f dB", method, mean_psnr(r for r in records if r.method == method))
    return records


def ablation_grid(spec: ExperimentSpec) -> list[tuple[str, float, dict]]:
    """``(variant, resample rate, overrides)`` for every siamrecon run of the sweep."""
    rate = spec.train.resample_spec.rate
    grid = [
        ("full", rate, {}),
        ("no_resampling", rate, {"ablations.no_resampling": True}),
        ("fixed_resample_mask", rate, {"ablations.fixed_resample_mask": True}),
        ("fixed_per_item_mask", rate, {"resample_spec.vary_per_step": False}),
        ("no_stop_gradient", rate, {"ablations.no_stop_gradient": True}),
        ("no_param_replacement", rate, {"ablations.no_param_replacement": True}),
    ]
    grid += [(f"rate_{r:g}", r, {"resample_spec.rate": r}) for r in spec.ablation_rates]
    return grid


def cmd_ablate(spec: ExperimentSpec) -> list[dict]:
    lay = Layout(spec)
    train = _load_split(lay, "train")
    test = _load_split(lay, "test")
    omega = _load_acquisition(spec, lay)
    val = _maybe_split(lay, "val")
    windowed = spec.eval.windowed_ssim
    init = _ssdu_init(spec, lay, train, val)
    base = spec.train.replace(strategy="siamrecon", **_clear_ablations())

    def score(net):
        recs = selfsup.evaluate(net, test, omega, windowed=windowed)
        ssim_mean = sum(r.ssim for r in recs) / len(recs)
        return mean_psnr(recs), ssim_mean

    zf_psnr, zf_ssim = score(None)
    init_psnr, init_ssim = score(init)
    rows = [
        {"variant": "zero_filled", "rate": "", "psnr_db": zf_psnr, "ssim": zf_ssim, "gain_db": zf_psnr - init_psnr},
        {"variant": "ssdu_init", "rate": "", "psnr_db": init_psnr, "ssim": init_ssim, "gain_db": 0.0},
    ]
    lay.ablation.mkdir(parents=True, exist_ok=True)
    done: dict[tuple, tuple] = {}
    for variant, rate, overrides in ablation_grid(spec):
        cfg = base.replace(**overrides)
        key = json.dumps(cfg.to_dict(), sort_keys=True)
        if key not in done:
            log.info("ablation %s", variant)
            net, report = selfsup.train_siamrecon(train, cfg, init, val)
            report.save(lay.ablation / f"report_{variant}.json")
            done[key] = score(net)
        p, s = done[key]
        rows.append({"variant": variant, "rate": rate, "psnr_db": p, "ssim": s, "gain_db": p - init_psnr})
    _write_ablation_csv(rows, lay.ablation / "ablation.csv")
    return rows


def _write_ablation_csv(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, ["variant", "rate", "psnr_db", "ssim", "gain_db"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


# --- entry point ----------------------------------------------------------


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--spec", default=d, help="experiment spec JSON")
    p.add_argument("--set", dest="overrides", action="append", default=d if suppress else [],
                   metavar="KEY=VALUE", help="override a spec field by dotted path (repeatable)")
    p.add_argument("--seed", type=int, default=d, help="training seed (train.seed)")
    p.add_argument("--out", default=d, help="output directory (output_dir)")
    p.add_argument("-v", "--verbose", action="store_true", default=d if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmri", description="Self-supervised MRI reconstruction experiments.")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sp = sub.add_parser(verb)
        _add_globals(sp, suppress=True)
        if verb == "eval":
            sp.add_argument("--pred", help="score this dataset directory instead of recon/")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        spec = load_spec(args.spec, args.overrides, args.seed, args.out)
        if args.verb == "gen-data":
            cmd_gen_data(spec)
        elif args.verb == "gen-mask":
            cmd_gen_mask(spec)
        elif args.verb == "train":
            cmd_train(spec)
        elif args.verb == "recon":
            cmd_recon(spec)
        elif args.verb == "eval":
            cmd_eval(spec, args.pred)
        else:
            cmd_ablate(spec)
    except (ArtifactError, ValidationError, FormatError, TrainingError, SolverError) as exc:
        print(f"ssmri {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
