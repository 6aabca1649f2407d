"""CSV and markdown summaries of run records, and latent scatter plots."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .experiments import mean_se
from .records import load_records

FORMATS = ("csv", "markdown", "plots")
METRICS = ("eps_ate", "sqrt_pehe")

# Published IHDP numbers for comparison rows, (within-sample, out-of-sample)
# mean and standard error.  Reported as literature values, never recomputed.
LITERATURE_IHDP = {
    "CFR": {"eps_ate": ((0.27, 0.01), (0.25, 0.01)), "sqrt_pehe": ((0.76, 0.02), (0.71, 0.02))},
    "CEVAE": {"eps_ate": ((0.46, 0.02), (0.34, 0.01)), "sqrt_pehe": ((2.6, 0.1), (2.7, 0.1))},
    "Intact-VAE, modified": {"eps_ate": ((0.31, 0.01), (0.30, 0.01)),
                             "sqrt_pehe": ((0.77, 0.02), (0.69, 0.02))},
}


def _report(record: dict, mode: str) -> Optional[dict]:
    for rep in record["reports"]:
        if rep["mode"] == mode:
            return rep
    return None


def summary_rows(records: Iterable[dict]) -> List[dict]:
    """One flat row per record with both metric modes side by side."""
    rows = []
    for rec in records:
        row = {"run_id": rec["run_id"], "kind": rec["kind"], "status": rec["status"]}
        row.update({k: v for k, v in rec["coords"].items()})
        for mode in ("pre", "post"):
            rep = _report(rec, mode)
            for metric in METRICS:
                row[f"{mode}_{metric}"] = "" if rep is None else rep[metric]
            aff = None if rep is None else rep.get("affine")
            row[f"{mode}_pooled_r2"] = "" if aff is None else aff["pooled_r2"]
            row[f"{mode}_group_consistency"] = "" if aff is None else aff["group_consistency"]
        rows.append(row)
    return rows


def _group_key(record: dict) -> tuple:
    c = record["coords"]
    if record["kind"] == "ihdp":
        return ("ihdp", c["variant"])
    return (record["kind"], c.get("structure"), c.get("family"), c.get("alpha"), c.get("beta"))


def aggregate_rows(records: Iterable[dict]) -> List[dict]:
    """Mean, standard deviation and standard error per group (noise point or IHDP variant)."""
    groups: Dict[tuple, List[dict]] = {}
    for rec in records:
        if rec["status"] == "ok":
            groups.setdefault(_group_key(rec), []).append(rec)
    out = []
    for key, recs in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        row = {"group": "/".join(str(k) for k in key), "n": len(recs)}
        for mode in ("pre", "post"):
            for metric in METRICS + ("pooled_r2", "group_consistency"):
                vals = []
                for rec in recs:
                    rep = _report(rec, mode)
                    if rep is None:
                        continue
                    if metric in METRICS:
                        vals.append(rep[metric])
                    elif rep.get("affine") is not None:
                        vals.append(rep["affine"][metric])
                if vals:
                    s = mean_se(vals)
                    row[f"{mode}_{metric}_mean"] = s["mean"]
                    row[f"{mode}_{metric}_std"] = s["std"]
                    row[f"{mode}_{metric}_se"] = s["se"]
                    if metric in ("pooled_r2", "group_consistency"):
                        row[f"{mode}_{metric}_median"] = float(np.median(vals))
        out.append(row)
    return out


def _write_csv(rows: List[dict], path: Path) -> Path:
    columns: List[str] = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _pm(mean: float, err: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f} ± {err:.{digits}f}"


def ihdp_table(records: Sequence[dict], include_literature: bool = True) -> str:
    """Table-1 layout: method rows, within-sample / out-of-sample columns, mean ± s.e."""
    lines = ["| Method | ε_ate (within) | ε_ate (out) | √ε_pehe (within) | √ε_pehe (out) |",
             "|---|---|---|---|---|"]
    variants = sorted({r["coords"]["variant"] for r in records if r["kind"] == "ihdp"})
    for variant in variants:
        cells = []
        for metric in METRICS:
            for mode in ("post", "pre"):
                vals = [_report(r, mode)[metric] for r in records
                        if r["kind"] == "ihdp" and r["status"] == "ok"
                        and r["coords"]["variant"] == variant and _report(r, mode)]
                s = mean_se(vals)
                cells.append(_pm(s["mean"], s["se"]) if vals else "n/a")
        n = sum(1 for r in records if r["kind"] == "ihdp" and r["coords"]["variant"] == variant
                and r["status"] == "ok")
        lines.append(f"| Intact-VAE, {variant} (this run, {n} reps) | " + " | ".join(cells) + " |")
    if include_literature:
        for name, vals in LITERATURE_IHDP.items():
            cells = [_pm(*vals[m][k]) for m in METRICS for k in (0, 1)]
            lines.append(f"| {name} (literature) | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def synthetic_table(records: Sequence[dict]) -> str:
    """Mean ± std over DGPs per (structure, family, alpha, beta)."""
    rows = [r for r in aggregate_rows(records) if not r["group"].startswith("ihdp")]
    lines = ["| Group | n | pre √ε_pehe | post √ε_pehe | pre ε_ate | post R² (median) | post gc (median) |",
             "|---|---|---|---|---|---|---|"]
    for row in rows:
        def cell(key, digits=3):
            if f"{key}_mean" not in row:
                return "n/a"
            return _pm(row[f"{key}_mean"], row[f"{key}_std"], digits)
        med = lambda key: f"{row[key]:.3f}" if key in row else "n/a"
        lines.append(f"| {row['group']} | {row['n']} | {cell('pre_sqrt_pehe')} | {cell('post_sqrt_pehe')} | "
                     f"{cell('pre_eps_ate')} | {med('post_pooled_r2_median')} | "
                     f"{med('post_group_consistency_median')} |")
    return "\n".join(lines) + "\n"


def plot_filename(record: dict) -> str:
    c = record["coords"]
    return f"latent_{c['structure']}_{c['family']}_a{c['alpha']:g}_b{c['beta']:g}_dgp{c['dgp']}.png"


def plot_latent(record: dict, path: Path) -> Path:
    """Posterior-mean latent vs true latent, colored by treatment group."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lat = np.load(record["artifacts"]["latents"])
    z_hat, z_true, t = lat["z_post"], lat["z_true_post"].reshape(-1), lat["t_post"].reshape(-1)
    z_hat = z_hat[:, 0] if z_hat.ndim == 2 else z_hat
    fig, ax = plt.subplots(figsize=(3.2, 3.0), dpi=100)
    for arm, color in ((0, "tab:blue"), (1, "tab:orange")):
        sel = t == arm
        ax.scatter(z_true[sel], z_hat[sel], s=3, alpha=0.6, color=color, label=f"t={arm}")
    ax.set_xlabel("true latent")
    ax.set_ylabel("recovered latent")
    ax.set_title(record["run_id"], fontsize=6)
    ax.legend(fontsize=6, markerscale=3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def render_report(inputs, out_dir, formats: Sequence[str] = FORMATS,
                  plot_runs: Optional[Sequence[str]] = None) -> List[Path]:
    """Write summary tables and plots for records read from ``inputs``.

    ``inputs`` is a list of JSON-lines paths or of already loaded records.
    Plots are made for synthetic records that saved their latents, limited to
    ``plot_runs`` run ids when given.
    """
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown formats {sorted(unknown)}")
    inputs = list(inputs)
    records = inputs if inputs and isinstance(inputs[0], dict) else load_records(inputs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        written.append(_write_csv(summary_rows(records), out / "summary.csv"))
        written.append(_write_csv(aggregate_rows(records), out / "aggregate.csv"))
    if "markdown" in formats:
        parts = []
        if any(r["kind"] == "synthetic" for r in records):
            parts += ["## Synthetic DGPs (mean ± std over DGPs)", "", synthetic_table(records)]
        if any(r["kind"] == "ihdp" for r in records):
            parts += ["## IHDP (mean ± standard error over replications)", "", ihdp_table(records)]
        path = out / "report.md"
        path.write_text("\n".join(parts))
        written.append(path)
    if "plots" in formats:
        wanted = None if plot_runs is None else set(plot_runs)
        for rec in records:
            if rec["kind"] != "synthetic" or "latents" not in rec.get("artifacts", {}):
                continue
            if wanted is not None and rec["run_id"] not in wanted:
                continue
            written.append(plot_latent(rec, out / plot_filename(rec)))
    return written
