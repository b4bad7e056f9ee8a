"""The six experiment commands.

Each ``cmd_*`` takes a resolved config section, a seed and an output
directory and returns an :class:`Outcome`; writing files is left to the
caller so the commands stay testable.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .core import BlockTemplate, MgicConfig
from .cost import (
    closed_form_mgic_params,
    count_macs,
    count_params,
    mgic_param_bound,
)
from .data import load_idx_dataset, sample_function_dataset, synth_feature_maps, write_digits_idx
from .errors import ConfigurationError, DataError, MgicError
from .gradcheck import check_case, mgic_block_case, primitive_cases
from .models import build_model
from .train import (
    SgdConfig,
    accuracy,
    cross_entropy,
    mse_first_component,
    seed_streams,
    train_loop,
)
from . import ops

__all__ = [
    "Table",
    "Outcome",
    "cmd_analyze",
    "cmd_approx",
    "cmd_reconstruct",
    "cmd_classify",
    "cmd_gradcheck",
    "cmd_ablate",
    "COMMAND_TABLE",
]


@dataclass
class Table:
    header: list
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


@dataclass
class Outcome:
    tables: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    text: str = ""
    ok: bool = True
    files: list = field(default_factory=list)


_OPT_KEYS = ("lr", "momentum", "weight_decay", "schedule", "step_every", "step_factor",
             "epochs", "batch_size")


def _sgd(section, seed):
    return SgdConfig(seed=seed, **{k: section[k] for k in _OPT_KEYS})


def _int_seed(rng):
    return int(rng.integers(0, 2 ** 63 - 1))


def _format_table(header, rows):
    cells = [[str(h) for h in header]] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


# -- analyze -------------------------------------------------------------------------

_DEFAULT_ARCH = {"kind": "mgic_block", "c": 64, "s_g": 8, "s_c": 8,
                 "template": {"variant": "simple", "d": 3}}


def _default_input_shape(arch):
    kind = arch.get("kind")
    if kind == "approx_net":
        return [1, 2, 1, 1]
    if kind == "classifier":
        return [1, arch.get("in_channels", 1), 12, 12]
    return [1, arch["c"], 8, 8]


def _mgic_summary(arch, input_shape, rng):
    """Exact, closed-form and fully-coupled-baseline counts for an MGIC block."""
    config = MgicConfig.from_dict(arch)
    block = build_model(arch, rng=rng)
    c = arch["c"]
    baseline = config.template.instantiate(c, None, rng=rng)
    report = count_macs(block, input_shape)
    base_report = count_macs(baseline, input_shape)
    conv_params = count_params(block, include_norm=False)
    base_conv = count_params(baseline, include_norm=False)
    out = {
        "mgic": report.to_dict(),
        "baseline": base_report.to_dict(),
        "mgic_conv_params": conv_params,
        "baseline_conv_params": base_conv,
        "param_ratio": conv_params / base_conv,
        "mac_ratio": report.macs / base_report.macs if base_report.macs else None,
        "widths": list(block.widths) if hasattr(block, "widths") else [c],
    }
    if config.template.variant == "simple":
        s_g = block.config.s_g if hasattr(block, "config") else config.s_g
        try:
            out["closed_form"] = closed_form_mgic_params(c, s_g, config.s_c, config.d)
            out["bound"] = mgic_param_bound(c, s_g, config.s_c, config.d)
        except ConfigurationError:
            pass
    return out


def cmd_analyze(section, seed, out_dir=None):
    init = seed_streams(seed)[0]
    outcome = Outcome()
    if "checkpoint" in section:
        model = load_checkpoint(section["checkpoint"])
        arch = model.arch
        shape = section.get("input_shape") or _default_input_shape(arch)
        report = count_macs(model, shape)
        outcome.reports["analyze.json"] = {"arch": arch, "input_shape": shape,
                                           "checkpoint": section["checkpoint"],
                                           "cost": report.to_dict()}
        rows = [[r["layer"], r["op"], "x".join(map(str, r["output_shape"])), r["params"], r["macs"]]
                for r in report.per_layer]
        outcome.text = (f"checkpoint {section['checkpoint']} ({arch.get('kind')})\n"
                        f"params {report.params}  macs {report.macs}  flops {report.flops}\n"
                        + _format_table(["layer", "op", "output", "params", "macs"], rows))
        return outcome

    arch = section.get("arch", _DEFAULT_ARCH)
    if arch.get("kind") != "mgic_block":
        model = build_model(arch, rng=init)
        shape = section.get("input_shape") or _default_input_shape(arch)
        report = count_macs(model, shape)
        outcome.reports["analyze.json"] = {"arch": arch, "input_shape": shape, "cost": report.to_dict()}
        outcome.text = f"params {report.params}  macs {report.macs}  flops {report.flops}"
        return outcome

    shape = list(section.get("input_shape") or _default_input_shape(arch))
    shape[1] = arch["c"]
    summary = _mgic_summary(arch, shape, init)
    doc = {"arch": arch, "input_shape": shape, **summary}
    lines = [
        f"MGIC block c={arch['c']} s_g={arch['s_g']} s_c={arch['s_c']} widths={summary['widths']}",
        _format_table(
            ["", "conv params", "all params", "macs", "train act", "infer act"],
            [["mgic", summary["mgic_conv_params"], summary["mgic"]["params"], summary["mgic"]["macs"],
              summary["mgic"]["train_activation"], summary["mgic"]["infer_activation"]],
             ["fully coupled", summary["baseline_conv_params"], summary["baseline"]["params"],
              summary["baseline"]["macs"], summary["baseline"]["train_activation"],
              summary["baseline"]["infer_activation"]]],
        ),
        f"param ratio {summary['param_ratio']:.4f}",
    ]
    if "closed_form" in summary:
        lines.append(f"closed form {summary['closed_form']}  bound {summary['bound']}")

    if section.get("sweep"):
        header = ["c", "mgic_params", "closed_form", "baseline_params", "mgic_growth", "baseline_growth"]
        table = Table(header)
        prev = None
        for c in section["sweep"]:
            cell = dict(arch, c=c)
            s = _mgic_summary(cell, [1, c] + shape[2:], init)
            m, b = s["mgic_conv_params"], s["baseline_conv_params"]
            growth = (m / prev[0], b / prev[1]) if prev else ("", "")
            table.rows.append([c, m, s.get("closed_form", ""), b, *growth])
            prev = (m, b)
        outcome.tables["sweep.csv"] = table
        doc["sweep"] = [dict(zip(header, r)) for r in table.rows]
        lines.append(_format_table(header, table.rows))
    outcome.reports["analyze.json"] = doc
    outcome.text = "\n".join(lines)
    return outcome


# -- approx ----------------------------------------------------------------------------


def _approx_arch(section, block):
    return {
        "kind": "approx_net",
        "alpha": section["alpha"],
        "block": block,
        "s_g": section["s_g"],
        "s_c": section["s_c"],
        "expansion": section["expansion"],
        "head_width": section["head_width"],
        "correction_gamma": section["correction_gamma"],
    }


def run_approx(section, seed, block, log=None):
    """Train one approximation network; returns (model, history, datasets)."""
    init, data_rng, shuffle = seed_streams(seed)
    train = sample_function_dataset(section["n"], _int_seed(data_rng))
    test = sample_function_dataset(section["n_eval"], _int_seed(data_rng))
    model = build_model(_approx_arch(section, block), rng=init)
    if block == "grouped":
        model.arch["baseline_group_size"] = model.group_size
    history = train_loop(model, train, _sgd(section, seed), mse_first_component, test,
                         shuffle_rng=shuffle, log=log)
    return model, history


def cmd_approx(section, seed, out_dir=None, log=None):
    blocks = ["mgic", "grouped"] if section["block"] == "both" else [section["block"]]
    outcome = Outcome()
    summary = {"config": {k: section[k] for k in sorted(section)}, "models": {}}
    meta = {"head-width": section["head_width"], "regime": section["regime"]}
    for block in blocks:
        model, history = run_approx(section, seed, block, log=log)
        table = Table(["epoch", "train_mse", "eval_mse"], meta=dict(meta, block=block))
        table.rows = [[r["epoch"], r["train_loss"], r["eval_metric"]] for r in history]
        outcome.tables[f"approx_{block}.csv"] = table
        summary["models"][block] = {
            "params": count_params(model),
            "group_size": getattr(model, "group_size", None),
            "epoch0_eval_mse": history[0]["eval_metric"],
            "final_eval_mse": history[-1]["eval_metric"],
            "final_train_mse": history[-1]["train_loss"],
        }
        if section.get("save_checkpoint") and out_dir is not None:
            path = os.path.join(out_dir, f"approx_{block}.ckpt")
            save_checkpoint(model, path)
            outcome.files.append(path)
    lines = [_format_table(["block", "params", "epoch-0 mse", "final mse"],
                           [[b, s["params"], s["epoch0_eval_mse"], s["final_eval_mse"]]
                            for b, s in summary["models"].items()])]
    if len(blocks) == 2:
        m, g = summary["models"]["mgic"], summary["models"]["grouped"]
        summary["comparison"] = {
            "reduction_vs_epoch0": m["epoch0_eval_mse"] / m["final_eval_mse"],
            "mgic_beats_baseline": m["final_eval_mse"] < g["final_eval_mse"],
        }
        lines.append(f"mgic / baseline final mse: {m['final_eval_mse'] / g['final_eval_mse']:.3f}")
    outcome.reports["approx.json"] = summary
    outcome.text = "\n".join(lines)
    return outcome


# -- reconstruct ---------------------------------------------------------------------------


def _reconstruction_mse(output, targets):
    return ops.mse_loss(output, Tensor(np.asarray(targets, dtype=output.dtype)))


def run_reconstruction(corpus, c, s_g, s_c, config, seed):
    init, _, shuffle = seed_streams(seed)
    model = build_model({"kind": "transfer_chain", "c": c, "s_g": s_g, "s_c": s_c}, rng=init)
    history = train_loop(model, corpus, config, _reconstruction_mse, shuffle_rng=shuffle)
    return model, history


def cmd_reconstruct(section, seed, out_dir=None):
    c, s_c = section["c"], section["s_c"]
    seeds = section.get("seeds") or [seed, seed + 1, seed + 2]
    table = Table(["seed", "s_g", "param_count", "initial_mse", "final_mse"],
                  meta={"optimizer": f"sgd(lr={section['lr']},momentum={section['momentum']})",
                        "epochs": section["epochs"], "rank": section["rank"]})
    trends = {}
    for sd in seeds:
        corpus = synth_feature_maps(section["n"], c, section["height"], section["width"], sd,
                                    rank=section["rank"], smooth=section["smooth"])
        finals = []
        for s_g in section["s_g_list"]:
            model, history = run_reconstruction(corpus, c, s_g, s_c, _sgd(section, sd), sd)
            table.rows.append([sd, s_g, count_params(model), history[0]["eval_metric"],
                               history[-1]["eval_metric"]])
            finals.append(history[-1]["eval_metric"])
        trends[sd] = bool(all(a > b for a, b in zip(finals, finals[1:])))
    outcome = Outcome(tables={"reconstruct.csv": table})
    outcome.reports["reconstruct.json"] = {
        "rows": [dict(zip(table.header, r)) for r in table.rows],
        "strictly_decreasing": {str(k): v for k, v in trends.items()},
    }
    outcome.text = _format_table(table.header, table.rows)
    return outcome


# -- classify -------------------------------------------------------------------------------


def _classify_data(section, seed, out_dir):
    keys = ("train_images", "train_labels", "test_images", "test_labels")
    if all(k in section for k in keys):
        paths = {k: section[k] for k in keys}
    elif section.get("generate_digits"):
        paths = write_digits_idx(os.path.join(out_dir or ".", "digits-idx"), seed=seed,
                                 copies=section["digit_copies"])
    else:
        raise ConfigurationError("classify needs the four IDX paths or generate_digits=true")
    train = load_idx_dataset(paths["train_images"], paths["train_labels"], "train")
    test = load_idx_dataset(paths["test_images"], paths["test_labels"], "test")
    if section.get("max_train"):
        train = train.subset(slice(0, section["max_train"]))
    return train, test


def _check_labels(data, num_classes):
    labels = np.asarray(data.targets)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(
            f"{data.split} labels span [{labels.min()}, {labels.max()}], outside [0, {num_classes})"
        )


def classifier_arch(model_section, block, in_channels, num_classes):
    return {
        "kind": "classifier",
        "in_channels": in_channels,
        "num_classes": num_classes,
        "widths": list(model_section["widths"]),
        "block": block,
        "s_g": model_section["s_g"],
        "s_c": model_section["s_c"],
        "template": model_section["template"],
        "correction_gamma": model_section["correction_gamma"],
    }


def cmd_classify(section, seed, out_dir=None, log=None, num_classes=10):
    train, test = _classify_data(section, seed, out_dir)
    for data in (train, test):
        _check_labels(data, num_classes)
    blocks = (["full"] if section.get("control") else []) + [section["model"]["block"]]
    table = Table(["model", "epoch", "train_loss", "test_accuracy"])
    summary = {}
    for block in blocks:
        init, _, shuffle = seed_streams(seed)
        arch = classifier_arch(section["model"], block, train.inputs.shape[1], num_classes)
        model = build_model(arch, rng=init)
        history = train_loop(model, train, _sgd(section, seed), cross_entropy, test, accuracy,
                             shuffle_rng=shuffle, log=log)
        table.rows += [[block, r["epoch"], r["train_loss"], r["eval_metric"]] for r in history]
        summary[block] = {"params": count_params(model), "final_accuracy": history[-1]["eval_metric"],
                          "initial_accuracy": history[0]["eval_metric"]}
    report = {"models": summary}
    if "full" in summary and "mgic" in summary:
        report["param_fraction"] = summary["mgic"]["params"] / summary["full"]["params"]
        report["accuracy_gap_points"] = 100 * (summary["full"]["final_accuracy"]
                                               - summary["mgic"]["final_accuracy"])
    outcome = Outcome(tables={"classify.csv": table}, reports={"classify.json": report})
    outcome.text = _format_table(["model", "params", "initial acc", "final acc"],
                                 [[b, s["params"], s["initial_accuracy"], s["final_accuracy"]]
                                  for b, s in summary.items()])
    return outcome


# -- gradcheck ----------------------------------------------------------------------------


def cmd_gradcheck(section, seed, out_dir=None, cases=None):
    cases = list(primitive_cases() if cases is None else cases)
    for case in cases:
        case.points = section["points"]
    blk = section["block"]
    cases += [mgic_block_case(blk["c"], blk["s_g"], blk["s_c"], training=True),
              mgic_block_case(blk["c"], blk["s_g"], blk["s_c"], training=False)]
    results = [check_case(case, seed=seed + k, eps=section["eps"], tol=section["tol"])
               for k, case in enumerate(cases)]
    table = Table(["name", "max_rel_error", "passed", "message"],
                  [[r.name, r.max_error, r.passed, r.message] for r in results])
    outcome = Outcome(tables={"gradcheck.csv": table},
                      reports={"gradcheck.json": [r.to_dict() for r in results]})
    outcome.ok = all(r.passed for r in results)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.max_error:.3e}  {r.message}".rstrip()
             for r in results]
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} passed")
    outcome.text = "\n".join(lines)
    return outcome


# -- ablate -------------------------------------------------------------------------------------


def _ablate_cell(section, seed, s_g, s_c):
    c, d = section["c"], section["d"]
    if section["task"] == "analyze":
        arch = {"kind": "mgic_block", "c": c, "s_g": s_g, "s_c": s_c,
                "template": {"variant": "simple", "d": d}}
        init = seed_streams(seed)[0]
        block = build_model(arch, rng=init)
        report = count_macs(block, [1, c, 8, 8])
        base = BlockTemplate("simple", d=d).instantiate(c, None, rng=init)
        metric = count_params(block, include_norm=False) / count_params(base, include_norm=False)
        return count_params(block, include_norm=False), report.macs, metric
    from .config import DEFAULTS

    approx = dict(DEFAULTS["approx"], **section.get("approx", {}))
    approx.update(s_g=s_g, s_c=s_c, block="mgic")
    model, history = run_approx(approx, seed, "mgic")
    macs = count_macs(model, [1, 2, 1, 1]).macs
    return count_params(model), macs, history[-1]["eval_metric"]


def cmd_ablate(section, seed, out_dir=None):
    table = Table(["s_g", "s_c", "params", "macs", "metric", "error"],
                  meta={"task": section["task"],
                        "metric": "param_ratio" if section["task"] == "analyze" else "final_eval_mse"})
    for s_c in section["s_c_list"]:
        for s_g in section["s_g_list"]:
            try:
                params, macs, metric = _ablate_cell(section, seed, s_g, s_c)
                table.rows.append([s_g, s_c, params, macs, metric, ""])
            except MgicError as exc:
                table.rows.append([s_g, s_c, "", "", "", f"{type(exc).__name__}: {exc}"])
    outcome = Outcome(tables={"ablate.csv": table})
    outcome.reports["ablate.json"] = [dict(zip(table.header, r)) for r in table.rows]
    outcome.text = _format_table(table.header, table.rows)
    return outcome


COMMAND_TABLE = {
    "analyze": cmd_analyze,
    "approx": cmd_approx,
    "reconstruct": cmd_reconstruct,
    "classify": cmd_classify,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}
