"""Prediction dumps and trajectory figures.

The dump is a TSV in the dataset trajectory schema plus a ``source`` column
(truth / recon / extrap). Figures are a convenience layer; the per-trajectory
CSV next to them is the reproducible contract.
"""

from __future__ import annotations

import os

import numpy as np
import torch

from .config import ExperimentConfig
from .data import TrajectorySet
from .errors import ConfigurationError
from .model import PhySSM
from .training import to_batch, _forward

__all__ = ["write_predictions", "read_predictions", "plot_predictions"]


def write_predictions(
    path: str, model: PhySSM, tset: TrajectorySet, config: ExperimentConfig
) -> None:
    """Evaluate deterministically and dump truth/recon/extrap rows per step."""
    batch = to_batch(tset, config.window, config.forecast)
    model.eval()
    with torch.no_grad():
        out = _forward(model, batch, horizon=config.forecast, sample=False)
    T, l = config.window, config.forecast
    d_x = batch.obs.shape[-1]
    with open(path, "w") as fh:
        fh.write("traj\ttime\tsource\t" + "\t".join(f"obs_{i}" for i in range(d_x)) + "\n")

        def rows(traj_id, times, values, source):
            for t, vec in zip(times, values):
                cells = [str(traj_id), repr(float(t)), source]
                cells += [repr(float(v)) for v in vec]
                fh.write("\t".join(cells) + "\n")

        for k in range(len(batch)):
            times = batch.times[k].numpy()
            rows(k, times[: T + l], torch.cat(
                [batch.clean_window[k], batch.clean_forecast[k]]).numpy(), "truth")
            rows(k, times[:T], out.recon[k].numpy(), "recon")
            rows(k, times[T : T + l], out.extrap[k].numpy(), "extrap")


def read_predictions(path: str) -> dict[int, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Parse a dump into {traj: {source: (times, values)}}."""
    if not os.path.exists(path):
        raise ConfigurationError(f"prediction dump not found: {path}")
    out: dict[int, dict[str, tuple[list, list]]] = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:3] != ["traj", "time", "source"]:
            raise ConfigurationError(f"{path} is not a prediction dump")
        for line in fh:
            cells = line.rstrip("\n").split("\t")
            traj, t, source = int(cells[0]), float(cells[1]), cells[2]
            vals = [float(c) for c in cells[3:]]
            slot = out.setdefault(traj, {}).setdefault(source, ([], []))
            slot[0].append(t)
            slot[1].append(vals)
    return {
        traj: {
            src: (np.array(ts), np.array(vs)) for src, (ts, vs) in sources.items()
        }
        for traj, sources in out.items()
    }


def plot_predictions(dump_path: str, out_dir: str, traj_ids=None) -> list[str]:
    """Per-dimension trajectory figures with an interp/extrap divider, plus a
    CSV per trajectory (one row per predicted step). Returns written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = read_predictions(dump_path)
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []
    ids = sorted(data) if traj_ids is None else traj_ids
    for traj in ids:
        if traj not in data:
            raise ConfigurationError(f"trajectory {traj} not in dump")
        sources = data[traj]
        t_rec, v_rec = sources["recon"]
        t_ext, v_ext = sources.get("extrap", (np.empty(0), np.empty((0, v_rec.shape[1]))))
        t_tru, v_tru = sources["truth"]
        d_x = v_rec.shape[1]

        csv_path = os.path.join(out_dir, f"traj{traj}.csv")
        with open(csv_path, "w") as fh:
            fh.write(
                "time,segment,"
                + ",".join(f"pred_{i}" for i in range(d_x))
                + ","
                + ",".join(f"truth_{i}" for i in range(d_x))
                + "\n"
            )
            truth_by_time = {repr(float(t)): v for t, v in zip(t_tru, v_tru)}
            for seg, (ts, vs) in (("interp", (t_rec, v_rec)), ("extrap", (t_ext, v_ext))):
                for t, vec in zip(ts, vs):
                    truth = truth_by_time.get(repr(float(t)), [float("nan")] * d_x)
                    fh.write(
                        repr(float(t))
                        + f",{seg},"
                        + ",".join(repr(float(v)) for v in vec)
                        + ","
                        + ",".join(repr(float(v)) for v in truth)
                        + "\n"
                    )
        written.append(csv_path)

        divider = float(t_rec[-1]) if len(t_ext) else None
        for dim in range(d_x):
            fig, ax = plt.subplots(figsize=(7, 3))
            ax.plot(t_tru, v_tru[:, dim], color="black", lw=1.0, label="truth")
            ax.plot(t_rec, v_rec[:, dim], color="tab:blue", lw=1.2, label="reconstruction")
            if len(t_ext):
                ax.plot(t_ext, v_ext[:, dim], color="tab:red", lw=1.2, label="forecast")
            if divider is not None:
                ax.axvline(divider, color="gray", ls="--", lw=1.0)
            ax.set_xlabel("time")
            ax.set_ylabel(f"obs[{dim}]")
            ax.legend(loc="best", fontsize=8)
            fig.tight_layout()
            png_path = os.path.join(out_dir, f"traj{traj}_dim{dim}.png")
            fig.savefig(png_path, dpi=110)
            plt.close(fig)
            written.append(png_path)
    return written
