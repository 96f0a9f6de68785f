"""Experiment commands: simulate, pretrain, select, reconstruct, spectra, report.

All outputs live under ``<output_dir>/<name>-<config hash>/<command>/``, so every
path is a function of the configuration, the command and the seed.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .. import unet
from ..baselines import baseline_tv_reconstruct
from ..ct import RayTransform, build_ray_transform
from ..dip import RunHistory, network_input, noise_input, read_history_csv, reconstruct
from ..metrics import aggregate, psnr, ssim, steady_psnr, summarize, write_summary_csv
from ..phantoms import make_record, record_seed, shepp_logan, simulate_measurement, test_phantom
from ..plotting import line_plot
from ..pngio import save_image_png
from ..pretrain import MIN_VAL_NAME, PretrainConfig, pretrain
from ..spectral import UNetForwardMap, block_histogram, rsvd, write_histogram_csv
from ..tensor import load_tensor, save_tensor
from .config import ExperimentConfig, MethodSpec
from .selection import Candidate, SelectionResult, select_checkpoint

COMMANDS = ("simulate", "pretrain", "select", "reconstruct", "spectra", "report")
VALIDATION_SEED_OFFSET = 1000


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; run `edip {producer}` first")
        self.path = path
        self.producer = producer


@dataclass
class Measurement:
    ground_truth: np.ndarray
    sinogram: np.ndarray
    fbp: np.ndarray


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return "" if x is None else (f"{x:.6f}" if isinstance(x, float) else str(x))


def _dip_job(args):
    spec, unet_cfg, seed, checkpoint, op, meas = args
    cfg = spec.dip_config(unet_cfg, seed, checkpoint)
    return reconstruct(cfg, op, meas.sinogram, ground_truth=meas.ground_truth)


class Experiment:
    def __init__(self, config: ExperimentConfig, out_dir=None, seed: int | None = None):
        self.config = config
        base = Path(out_dir if out_dir is not None else config.output_dir)
        self.root = base / f"{config.name}-{config.hash()}"
        self.seed_override = seed

    # -- shared state ------------------------------------------------------------------

    @cached_property
    def op(self) -> RayTransform:
        return build_ray_transform(self.config.geometry)

    @property
    def seeds(self) -> list[int]:
        return [self.seed_override] if self.seed_override is not None else list(self.config.seeds)

    def dir(self, command: str) -> Path:
        d = self.root / command
        d.mkdir(parents=True, exist_ok=True)
        (self.root / "config.json").write_text(self.config.to_json())
        return d

    def _require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(path, producer)
        return path

    def _measure(self, image: np.ndarray, seed: int) -> Measurement:
        y, fbp = simulate_measurement(self.op, image, self.config.noise, seed)
        return Measurement(image, y, fbp)

    def test_measurement(self) -> Measurement:
        img = test_phantom(self.config.test_phantom, self.config.geometry.image_size)
        return self._measure(img, self.config.measurement_seed)

    def validation_measurement(self) -> Measurement:
        img = shepp_logan(self.config.geometry.image_size)
        return self._measure(img, self.config.measurement_seed + VALIDATION_SEED_OFFSET)

    def _load_measurement(self, prefix: str) -> Measurement:
        d = self.root / "simulate"
        parts = [load_tensor(self._require(d / f"{prefix}_{k}.edipt", "simulate"))
                 for k in ("ground_truth", "sinogram", "fbp")]
        return Measurement(*parts)

    # -- simulate ------------------------------------------------------------------------

    def simulate(self) -> Path:
        d = self.dir("simulate")
        rows = []
        for prefix, meas, phantom in (("test", self.test_measurement(), self.config.test_phantom),
                                      ("validation", self.validation_measurement(), "shepp-logan")):
            for key in ("ground_truth", "sinogram", "fbp"):
                arr = getattr(meas, key)
                save_tensor(d / f"{prefix}_{key}.edipt", arr)
                save_image_png(d / f"{prefix}_{key}.png", arr, 16)
            rows.append([prefix, phantom, _fmt(psnr(meas.fbp, meas.ground_truth)),
                         _fmt(ssim(meas.fbp, meas.ground_truth))])
        for k in range(4):
            rec = make_record(self.config.ellipses, self.op, self.config.noise,
                              record_seed(self.config.pretrain_seeds[0], "train", k))
            save_image_png(d / f"ellipses_{k}_ground_truth.png", rec.ground_truth, 8, 0.0, 1.0)
            save_image_png(d / f"ellipses_{k}_fbp.png", rec.fbp, 8, 0.0, 1.0)
        _write_rows(d / "measurements.csv", ["task", "phantom", "fbp_psnr", "fbp_ssim"], rows)
        return d

    # -- pretrain ------------------------------------------------------------------------

    def pretrain_config(self, seed: int) -> PretrainConfig:
        return PretrainConfig.from_dict({**self.config.pretrain.to_dict(), "seed": seed})

    def pretrain(self) -> Path:
        d = self.dir("pretrain")
        seeds = [self.seed_override] if self.seed_override is not None else self.config.pretrain_seeds
        for s in seeds:
            pretrain(self.pretrain_config(s), self.op, d / f"run{s}")
        return d

    def checkpoint_candidates(self) -> list[tuple[str, Path]]:
        d = self._require(self.root / "pretrain", "pretrain")
        out = []
        for s in self.config.pretrain_seeds:
            run = self._require(d / f"run{s}" / "pretrain_log.csv", "pretrain").parent
            with open(run / "pretrain_log.csv", newline="") as fh:
                for row in csv.DictReader(fh):
                    if row["checkpoint_path"]:
                        out.append((f"run{s}/epoch{int(row['epoch'])}", run / row["checkpoint_path"]))
            if (run / MIN_VAL_NAME).exists():
                out.append((f"run{s}/minval", run / MIN_VAL_NAME))
        return out

    # -- select --------------------------------------------------------------------------

    def _validation_methods(self) -> tuple[MethodSpec, MethodSpec]:
        c = self.config
        methods = c.validation_methods or c.methods
        base = methods.get(c.baseline_method)
        pre = next((m for m in methods.values() if m.init == "pretrained"), None)
        if base is None or pre is None:
            raise ValueError("validation needs the baseline method and one pretrained method")
        return base, pre

    def _trace(self, hists: list[RunHistory]) -> tuple[np.ndarray, np.ndarray]:
        length = min(len(h) for h in hists)
        grids = [h.psnr_trace() for h in hists]
        it = grids[0][0][grids[0][0] < length]
        return it, np.stack([g[1][:len(it)] for g in grids])

    def select(self) -> SelectionResult:
        d = self.dir("select")
        c = self.config
        meas = self.validation_measurement()
        base_spec, pre_spec = self._validation_methods()
        base_hists = [self._run(base_spec, s, None, meas) for s in c.validation_seeds]
        it, traces = self._trace(base_hists)
        baseline = steady_psnr(aggregate(traces, it), c.tail_fraction)
        for s, h in zip(c.validation_seeds, base_hists):
            h.write_csv(d / f"baseline_seed{s}.csv", c.record_wall_time)
        cands = []
        for name, path in self.checkpoint_candidates():
            params, _ = unet.load_checkpoint(path, c.unet)
            hist = self._run(pre_spec, c.validation_seeds[0], str(path), meas, params)
            tag = name.replace("/", "_")
            hist.write_csv(d / f"candidate_{tag}.csv", c.record_wall_time)
            it_c, tr = self._trace([hist])
            summ = summarize(aggregate(tr, it_c), baseline, c.rise_margin, c.tail_fraction)
            cands.append(Candidate(name, summ.steady_psnr, summ.rise_time, str(path.relative_to(self.root))))
        result = select_checkpoint(cands, c.selection_margin)
        _write_rows(d / "candidates.csv", ["candidate", "checkpoint", "steady_psnr", "rise_time", "selected"],
                    [[k.name, k.checkpoint, _fmt(k.steady_psnr), _fmt(k.rise_time), int(k == result.selected)]
                     for k in result.candidates])
        payload = {**result.to_dict(), "baseline_steady_psnr": baseline}
        (d / "selection.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return result

    def selected_checkpoint(self) -> Path:
        f = self._require(self.root / "select" / "selection.json", "select")
        return self.root / json.loads(f.read_text())["selected"]["checkpoint"]

    # -- reconstruct ---------------------------------------------------------------------

    def _run(self, spec: MethodSpec, seed: int, checkpoint: str | None, meas: Measurement,
             params=None) -> RunHistory:
        cfg = spec.dip_config(self.config.unet, seed, checkpoint)
        return reconstruct(cfg, self.op, meas.sinogram, ground_truth=meas.ground_truth, params=params).history

    def reconstruct(self) -> Path:
        d = self.dir("reconstruct")
        c = self.config
        meas = self._load_measurement("test")
        needs_ckpt = any(m.init == "pretrained" for m in c.methods.values())
        ckpt = str(self.selected_checkpoint()) if needs_ckpt else None
        jobs, keys = [], []
        for name, spec in c.methods.items():
            seeds = self.seeds[:1] if spec.seed_invariant else self.seeds
            for s in seeds:
                jobs.append((spec, c.unet, s, ckpt if spec.init == "pretrained" else None, self.op, meas))
                keys.append((name, s))
        if c.workers > 1:
            with ProcessPoolExecutor(c.workers) as pool:
                results = list(pool.map(_dip_job, jobs))
        else:
            results = [_dip_job(j) for j in jobs]
        by_key = dict(zip(keys, results))
        for name, spec in c.methods.items():
            for s in self.seeds:
                res = by_key[(name, self.seeds[0] if spec.seed_invariant else s)]
                run = d / name / f"seed{s}"
                run.mkdir(parents=True, exist_ok=True)
                res.history.write_csv(run / "history.csv", c.record_wall_time)
                save_tensor(run / "min_loss_output.edipt", res.min_loss_output)
                save_tensor(run / "final_output.edipt", res.final_output)
                save_image_png(run / "min_loss_output.png", res.min_loss_output, 8, 0.0, 1.0)
                dip_cfg = spec.dip_config(c.unet, s, None if ckpt is None or spec.init != "pretrained"
                                          else str(Path(ckpt).relative_to(self.root)))
                (run / "run.json").write_text(json.dumps(
                    {"experiment": c.to_dict(), "method": name, "seed": s, "dip": dip_cfg.to_dict()},
                    indent=2, sort_keys=True) + "\n")
        if c.tv_baseline:
            tv = c.tv_baseline
            x, hist = baseline_tv_reconstruct(self.op, meas.sinogram, float(tv.get("gamma_prime", 1e-4)),
                                              float(tv.get("lr", 5e-4)), int(tv.get("iters", 5000)),
                                              ground_truth=meas.ground_truth,
                                              eval_every=int(tv.get("eval_every", 10)))
            run = d / "tv"
            run.mkdir(exist_ok=True)
            hist.write_csv(run / "history.csv", c.record_wall_time)
            save_tensor(run / "final_output.edipt", x)
            save_image_png(run / "final_output.png", x, 8, 0.0, 1.0)
        self.write_summary(d / "summary.csv")
        return d

    # -- summaries and report ------------------------------------------------------------

    def method_traces(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        c = self.config
        d = self._require(self.root / "reconstruct", "reconstruct")
        out = {}
        for name, spec in c.methods.items():
            hists = [read_history_csv(self._require(d / name / f"seed{s}" / "history.csv", "reconstruct"),
                                      spec.eval_every) for s in self.seeds]
            out[name] = self._trace(hists)
        if c.tv_baseline and (d / "tv" / "history.csv").exists():
            h = read_history_csv(d / "tv" / "history.csv", int(c.tv_baseline.get("eval_every", 10)))
            out["tv"] = self._trace([h])
        return out

    def write_summary(self, path: Path) -> dict:
        c = self.config
        traces = self.method_traces()
        it, tr = traces[c.baseline_method]
        baseline = steady_psnr(aggregate(tr, it), c.tail_fraction)
        summaries = {name: summarize(aggregate(tr, it), baseline, c.rise_margin, c.tail_fraction)
                     for name, (it, tr) in traces.items()}
        write_summary_csv(path, summaries)
        return summaries

    def report(self) -> Path:
        d = self.dir("report")
        self.write_summary(d / "table.csv")
        traces = self.method_traces()
        names = list(traces)
        line_plot(d / "convergence.png",
                  [(it + 1, aggregate(tr, it).median) for it, tr in traces.values()], logx=True)
        _write_rows(d / "convergence_legend.csv", ["series", "method"], [[i, n] for i, n in enumerate(names)])
        pre = self.root / "pretrain"
        if pre.exists():
            series = []
            for s in self.config.pretrain_seeds:
                log = pre / f"run{s}" / "pretrain_log.csv"
                if log.exists():
                    with open(log, newline="") as fh:
                        rows = list(csv.DictReader(fh))
                    series.append(([int(r["epoch"]) for r in rows], [float(r["val_loss"]) for r in rows]))
            if series:
                line_plot(d / "pretrain_val_loss.png", series, logy=True)
        return d

    # -- spectra --------------------------------------------------------------------------

    def spectral_params(self, spec: MethodSpec, seed: int):
        if spec.init == "pretrained":
            params, _ = unet.load_checkpoint(self.selected_checkpoint(), self.config.unet)
            return params
        return unet.init_params(self.config.unet, seed)

    def spectra(self) -> Path:
        d = self.dir("spectra")
        c = self.config
        meas = self._load_measurement("test")
        mid = int(c.spectral.get("mid_iters", 100))
        seed = self.seeds[0]
        rows = []
        for name in c.spectral.get("methods", []):
            spec = c.methods[name]
            ckpt = str(self.selected_checkpoint()) if spec.init == "pretrained" else None
            params = self.spectral_params(spec, seed)
            dip_cfg = spec.dip_config(c.unet, seed, ckpt)
            z = network_input(dip_cfg, self.op, meas.sinogram)
            snapshots = {"init": params.copy()}

            def grab(i, p, _snap=snapshots):
                if i == mid:
                    _snap["mid"] = p.copy()

            res = reconstruct(dip_cfg, self.op, meas.sinogram, params=params, callback=grab)
            snapshots["converged"] = res.params
            for tag in ("init", "mid", "converged"):
                if tag not in snapshots:
                    continue
                report = rsvd(UNetForwardMap(snapshots[tag], z, self.op), c.rsvd_config(), tag)
                out = d / name / tag
                out.mkdir(parents=True, exist_ok=True)
                report.write_sigma_csv(out / "sigma.csv")
                report.write_block_mass_csv(out / "block_mass.csv")
                hists = block_histogram(report)
                write_histogram_csv(out / "histogram.csv", hists)
                line_plot(out / "sigma.png", [(np.arange(1, len(report.singular_values) + 1),
                                               report.singular_values)], logx=True, logy=True)
                lead = hists[0]
                rows.append([name, tag, _fmt(lead.mean_hoyer), _fmt(lead.tag_mass["encoder"]),
                             _fmt(lead.tag_mass["decoder"]), _fmt(float(report.singular_values[0]))])
        _write_rows(d / "summary.csv", ["method", "tag", "mean_hoyer_leading", "encoder_mass_leading",
                                        "decoder_mass_leading", "sigma_max"], rows)
        return d


def run_command(command: str, config: ExperimentConfig, out_dir=None, seed: int | None = None):
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    return getattr(Experiment(config, out_dir, seed), command)()


def init_psnr_gap(exp: Experiment) -> tuple[float, float]:
    """Initial PSNR on the test phantom: selected checkpoint fed the FBP vs random networks fed noise.

    The random side averages over the configured seeds, matching DIP (noise) at iteration 0.
    """
    meas = exp._load_measurement("test")
    n = exp.config.geometry.image_size
    params, _ = unet.load_checkpoint(exp.selected_checkpoint(), exp.config.unet)
    trained = psnr(unet.predict(params, meas.fbp), meas.ground_truth)
    random = [psnr(unet.predict(unet.init_params(exp.config.unet, s), noise_input(n, s))[0], meas.ground_truth)
              for s in exp.seeds]
    return trained, float(np.mean(random))


__all__ = ["COMMANDS", "Experiment", "MissingArtifactError", "init_psnr_gap", "run_command"]
