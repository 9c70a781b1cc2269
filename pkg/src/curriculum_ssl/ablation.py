"""Grid runs over config axes with shared corpora and shared warmups."""
from __future__ import annotations

import itertools
import json
from pathlib import Path
from typing import Optional

from .config import TrainConfig, apply_overrides, validate
from .trainer import TrainState, _clone, _streams, evaluate, supervised_warmup, train


def _warmup_key(cfg: TrainConfig) -> str:
    # everything the warmup phase reads; the LR schedule spans S + F
    return json.dumps(
        {"seed": cfg.seed, "model": cfg.model.model_dump(), "optim": cfg.optim.model_dump(),
         "augment": cfg.augment.model_dump()},
        sort_keys=True,
    )


def expand_grid(axes: dict) -> list[dict]:
    """Cartesian product of ``{dotted.key: [values]}`` as a list of override dicts."""
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def run_ablation_grid(base: TrainConfig, axes: dict, corpus, out: Optional[Path] = None,
                      warm_cache: Optional[dict] = None) -> dict:
    """Train every cell of the grid and collect final dev/test TER.

    Cells with the same warmup-relevant settings share one warmup run, so two
    cells that differ only in selection mode start from identical weights.
    """
    warm_cache = {} if warm_cache is None else warm_cache
    base_raw = base.model_dump()
    rows = []
    for i, cell in enumerate(expand_grid(axes)):
        raw = apply_overrides(base_raw, [f"{k}={json.dumps(v)}" for k, v in cell.items()])
        cfg = validate(raw)
        key = _warmup_key(cfg)
        if key not in warm_cache:
            warm_cache[key] = supervised_warmup(cfg, corpus, _streams(cfg.seed))
        warm: TrainState = warm_cache[key]
        cell_out = Path(out) / f"cell_{i:03d}" if out is not None else None
        result = train(cfg, corpus, cell_out, warm_start=_clone(warm))
        rows.append({
            "cell": i,
            "overrides": cell,
            "warmup_dev_ter": evaluate(warm.params, corpus.dev),
            "dev_ter": result.final_dev_ter,
            "dev_ter_ema": result.final_dev_ter_ema,
            "test_ter": evaluate(result.state.params, corpus.test),
            "test_ter_ema": evaluate(result.state.ema, corpus.test),
        })
    table = {"axes": axes, "rows": rows}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
        (out / "ablation.txt").write_text(format_table(table))
    return table


def format_table(table: dict) -> str:
    keys = list(table["axes"])
    cols = keys + ["warmup_dev", "dev", "dev_ema", "test", "test_ema"]
    body = []
    for r in table["rows"]:
        vals = [str(r["overrides"][k]) for k in keys]
        vals += [f"{r[m]:.4f}" for m in ("warmup_dev_ter", "dev_ter", "dev_ter_ema", "test_ter", "test_ter_ema")]
        body.append(vals)
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"
