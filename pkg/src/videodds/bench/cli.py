"""Experiment command line: ``videodds MODE [--config FILE] [--key value ...]``.

Every run-config key is also a flag, and flags override the config file.
Failures print one ``error code=... message=...`` line on stderr and exit
nonzero; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
from dataclasses import asdict, fields
from pathlib import Path

import torch

from ..denoisers import TinyVideoDenoiser, load_params, load_pretrained, save_params, train_denoiser
from ..diffcore import COLOR_WORDS, condition, sample
from ..engine import EditDiverged, TraceRow, cascade_baseline, cascade_edit, edit
from .config import RunConfig, apply_overrides, dump_config, load_config
from .io import load_mask, load_video, save_video
from .metrics import MetricReport, centroid_trajectory, evaluate
from .synthetic import color_mean, standard_example, training_set
from .verify import run_checks

MODES = ("train", "edit", "cascade", "ablate", "sample", "verify")
ABLATION_ARMS = ("vdds", "vdds_sssm", "vdds_sssm_tssm")

log = logging.getLogger("videodds")


class CliError(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# -- helpers --------------------------------------------------------------------


def _denoiser(cfg: RunConfig) -> TinyVideoDenoiser:
    return load_params(cfg.params) if cfg.params else load_pretrained()


def _target_mean(caption: str) -> torch.Tensor:
    for word in caption.split():
        if word in COLOR_WORDS:
            return color_mean(word)
    raise CliError("BAD_CAPTION", f"target caption {caption!r} names no colour ({', '.join(COLOR_WORDS)})")


def _inputs(cfg: RunConfig, frames: int, height: int, width: int):
    """(video, edit mask, ground-truth trajectory or None)."""
    if not cfg.video:
        video, obj, box, _ = standard_example(frames, height, width)
        return video, box, centroid_trajectory(obj)
    if not cfg.mask:
        raise CliError("MISSING_INPUT", "a video file needs a matching mask file")
    video, mask = load_video(cfg.video), load_mask(cfg.mask)
    gt = centroid_trajectory(load_mask(cfg.object_mask)) if cfg.object_mask else None
    return video, mask, gt


def write_trace(trace: list[TraceRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f.name for f in fields(TraceRow)])
        for r in trace:
            w.writerow([r.step, r.t, repr(r.grad_norm_vdds), repr(r.loss_sssm), repr(r.loss_tssm)])


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    return out


def _run_edit(cfg, d, video, mask, gt, out: Path, name: str = "", **overrides) -> MetricReport:
    sched = d.schedule()
    ecfg = cfg.edit_config(**overrides)
    try:
        x, trace = edit(video, condition(cfg.source), condition(cfg.target), mask, ecfg, d, sched)
    except EditDiverged as exc:
        write_trace(exc.trace, out / f"trace{name}.csv")
        raise
    save_video(x, out / f"edited{name}.dmv")
    write_trace(trace, out / f"trace{name}.csv")
    report = evaluate(video, x, mask, _target_mean(cfg.target), d, gt)
    (out / f"report{name}.txt").write_text(report.as_text())
    return report


# -- modes ------------------------------------------------------------------------


def mode_train(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    videos, captions = training_set(cfg.train_count, cfg.train_seed, cfg.frames, cfg.height, cfg.width)
    sched = TinyVideoDenoiser(height=cfg.height, width=cfg.width).schedule()
    result = train_denoiser(videos, captions, sched, steps=cfg.train_steps, lr=cfg.train_lr, seed=cfg.train_seed)
    save_params(result.model, out / "denoiser.dmp")
    with open(out / "train_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(result.trace))
    print(f"saved {out / 'denoiser.dmp'}")
    return 0


def mode_edit(cfg: RunConfig) -> int:
    d = _denoiser(cfg)
    video, mask, gt = _inputs(cfg, 8, d.height, d.width)
    out = _outdir(cfg)
    report = _run_edit(cfg, d, video, mask, gt, out)
    print(report.as_text(), end="")
    return 0


def mode_cascade(cfg: RunConfig) -> int:
    d = _denoiser(cfg)
    frames = (8 - 1) * cfg.temporal + 1
    video, mask, gt = _inputs(cfg, frames, d.height * cfg.spatial, d.width * cfg.spatial)
    out = _outdir(cfg)
    x, trace = cascade_edit(
        video,
        condition(cfg.source),
        condition(cfg.target),
        mask,
        cfg.edit_config(),
        d,
        d.schedule(),
        spatial=cfg.spatial,
        temporal=cfg.temporal,
    )
    save_video(x, out / "edited.dmv")
    write_trace(trace, out / "trace.csv")
    # score against the resampled source: the round trip alone is not an edit
    base = cascade_baseline(video, cfg.spatial, cfg.temporal)
    report = evaluate(base, x, mask, _target_mean(cfg.target), None, gt)
    (out / "report.txt").write_text(report.as_text())
    print(report.as_text(), end="")
    return 0


def ablation_overrides(cfg: RunConfig) -> dict[str, dict]:
    return {
        "vdds": dict(lambda_s=0.0, lambda_t=0.0),
        "vdds_sssm": dict(lambda_s=cfg.lambda_s, lambda_t=0.0),
        "vdds_sssm_tssm": dict(lambda_s=cfg.lambda_s, lambda_t=cfg.lambda_t),
    }


def median_report(reports: list[MetricReport]) -> MetricReport:
    keys = [f.name for f in fields(MetricReport)]
    return MetricReport(**{k: statistics.median(getattr(r, k) for r in reports) for k in keys})


def mode_ablate(cfg: RunConfig) -> int:
    if cfg.seeds < 1:
        raise CliError("BAD_CONFIG", "seeds must be >= 1")
    d = _denoiser(cfg)
    video, mask, gt = _inputs(cfg, 8, d.height, d.width)
    out = _outdir(cfg)
    per_arm: dict[str, list[MetricReport]] = {a: [] for a in ABLATION_ARMS}
    rows = []
    for arm, over in ablation_overrides(cfg).items():
        for k in range(cfg.seeds):
            seed = cfg.seed + k
            rep = _run_edit(cfg, d, video, mask, gt, out, f"_{arm}_seed{seed}", seed=seed, **over)
            per_arm[arm].append(rep)
            rows.append({"arm": arm, "seed": seed, **asdict(rep)})
    with open(out / "ablate_runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for arm in ABLATION_ARMS:
        med = median_report(per_arm[arm])
        (out / f"report_{arm}.txt").write_text(med.as_text())
        print(
            f"{arm}: median motion_dev_max={med.motion_dev_max:.4f} "
            f"frame_consistency={med.frame_consistency:.5f} out_mask_mse={med.out_mask_mse:.3g}"
        )
    return 0


def mode_sample(cfg: RunConfig) -> int:
    d = _denoiser(cfg)
    out = _outdir(cfg)
    shape = (cfg.frames, d.channels, d.height, d.width)
    x = sample(d, condition(cfg.caption), cfg.sample_w, d.schedule(), shape, cfg.seed, cfg.sample_noise)
    save_video(x, out / "sample.dmv")
    print(f"saved {out / 'sample.dmv'}")
    return 0


def mode_verify(cfg: RunConfig) -> int:
    return 1 if run_checks() else 0


HANDLERS = {
    "train": mode_train,
    "edit": mode_edit,
    "cascade": mode_cascade,
    "ablate": mode_ablate,
    "sample": mode_sample,
    "verify": mode_verify,
}


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="videodds", description="Masked video score-distillation editing on toy data.")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", help="flat key = value run file")
    p.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, metavar="VALUE", default=None)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        flags = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
        apply_overrides(cfg, flags)
        return HANDLERS[args.mode](cfg)
    except Exception as exc:
        code = getattr(exc, "code", None) or type(exc).__name__
        msg = str(exc).replace("\n", " ")
        print(f"error code={code} message={msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
