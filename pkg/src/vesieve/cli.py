"""Command-line front end: fit, test, simulate, and report workflows.

Every command resolves its options from flags over an optional flat
``key = value`` config file, runs single-process (simulate may fan out
replicates), and writes CSV tables, a pretty-text mirror (report.txt), a
machine-readable report.json, and a manifest.json capturing inputs,
resolved options, and seeds. Outputs contain no timestamps, so a rerun
with the same inputs is byte-identical.

Exit codes: 0 success, 1 numerical failure, 2 input/config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from ._core import BACKEND
from .data import Schema, load_dataset, validate
from .errors import ConfigError, DataError, NumericalError, VesieveError
from .inference import efficacy_report, sieve_tests, threshold_tests
from .missingness import StructuralCause
from .simulation import AUX_LEVELS, SCENARIOS, fit_model, run_study, scenario

_METHODS = ("cc", "ipw", "aipw")


def _str_list(txt):
    return tuple(s.strip() for s in str(txt).split(",") if s.strip())


def _int_list(txt):
    return tuple(int(s) for s in _str_list(txt))


def _bool(txt):
    low = str(txt).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {txt!r}")


# option name -> (converter, default); shared across flag and config parsing
_COMMON = {
    "config": (str, None),
    "out": (str, "."),
    "seed": (int, 0),
    "level": (float, 0.05),
}
_FIT_DATA = {
    "data": (str, None),
    "covariates": (_str_list, None),
    "method": (str, "aipw"),
    "tau": (float, None),
    "completeness_features": (_str_list, ("z1", "a")),
    "cause_features": (_str_list, ("z1", "a")),
    "structural_cause": (int, None),
    "structural_threshold": (float, None),
    "share_strata": (_bool, False),
    "ipw_weight_mode": (str, "first-order"),
    "ci_form": (str, "log"),
}
_OPTIONS = {
    "fit": {**_COMMON, **_FIT_DATA},
    "test": {
        **_COMMON,
        **_FIT_DATA,
        "ve0": (float, 0.3),
        "B": (int, 100_000),
        "family": (_str_list, ("threshold", "sieve")),
        "causes": (_int_list, None),
    },
    "simulate": {
        **_COMMON,
        "scenario": (str, "M3"),
        "aux": (str, "aux0"),
        "n": (int, 1200),
        "n_reps": (int, 200),
        "methods": (_str_list, _METHODS),
        "tests": (_str_list, ("threshold", "sieve")),
        "test_method": (str, "ipw"),
        "ve0": (float, 0.3),
        "B": (int, 20_000),
        "ipw_weight_mode": (str, "first-order"),
        "n_jobs": (int, 1),
        "max_failure_rate": (float, 0.02),
    },
    "report": {"run": (str, None)},
}

_HELP = {
    "fit": "fit one model and write coefficient/efficacy/baseline tables",
    "test": "fit and run efficacy threshold and sieve hypothesis tests",
    "simulate": "replicate a synthetic scenario and summarize estimators/tests",
    "report": "re-render the pretty text report from a previous run directory",
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="vesieve",
        description="Stratified competing-risks efficacy analysis with "
        "missing failure causes (complete-case, IPW, AIPW).",
    )
    parser.add_argument("--version", action="version", version=f"vesieve {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in _OPTIONS.items():
        cp = sub.add_parser(cmd, help=_HELP[cmd])
        for key in opts:
            cp.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    return parser


def _read_config(path):
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value'")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _resolve(args, command):
    """Merge flag values over config values over defaults, with types."""
    table = _OPTIONS[command]
    cfg_raw = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        cfg_raw = _read_config(cfg_path)
        unknown = set(cfg_raw) - set(table)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for key, (conv, default) in table.items():
        flag = getattr(args, key)
        try:
            if flag is not None:
                out[key] = conv(flag)
            elif key in cfg_raw:
                out[key] = conv(cfg_raw[key])
            else:
                out[key] = default
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for --{key.replace('_', '-')}: {exc}") from exc
    return out


def _fmt(x):
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return f"{x:.6g}"
    return str(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _text_table(title, header, rows):
    cells = [list(map(_fmt, row)) for row in rows]
    widths = [
        max(len(header[i]), *(len(r[i]) for r in cells)) if cells else len(header[i])
        for i in range(len(header))
    ]
    lines = [title, "-" * len(title)]
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(header)))
    for r in cells:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(header))))
    return "\n".join(lines) + "\n"


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


def _manifest(command, options, extra=None):
    man = {
        "command": command,
        "options": {k: v for k, v in options.items()},
        "package": f"vesieve {__version__}",
        "backend": BACKEND,
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    data = options.get("data")
    if data:
        digest = hashlib.sha256(Path(data).read_bytes()).hexdigest()
        man["data_sha256"] = digest
    if extra:
        man.update(extra)
    return man


def _load_fit(o):
    """Shared fit pipeline for the fit and test commands."""
    if not o["data"]:
        raise ConfigError("--data is required")
    if o["method"] not in _METHODS:
        raise ConfigError(f"--method must be one of {_METHODS}")
    if o["ci_form"] not in ("log", "delta"):
        raise ConfigError("--ci-form must be 'log' or 'delta'")
    structural = None
    if o["structural_cause"] is not None:
        if o["structural_threshold"] is None:
            raise ConfigError("--structural-cause needs --structural-threshold")
        structural = StructuralCause(
            cause=o["structural_cause"], threshold=o["structural_threshold"]
        )
    ds = load_dataset(o["data"], Schema(), covariates=o["covariates"], tau=o["tau"])
    fit, var = fit_model(
        ds,
        o["method"],
        completeness_features=o["completeness_features"],
        cause_features=o["cause_features"],
        structural=structural,
        pooled=o["share_strata"],
        ipw_weight_mode=o["ipw_weight_mode"],
    )
    report = validate(ds, completeness=fit.completeness)
    return ds, fit, var, structural, report.warnings


def _coef_rows(fit, var):
    from scipy.stats import norm

    rows = []
    for j in range(fit.n_causes):
        for i, name in enumerate(fit.covariate_names):
            est, se = fit.beta[j, i], var.se[j, i]
            z = est / se if se > 0 else math.inf
            rows.append(
                (j + 1, name, est, se, z, 2.0 * float(norm.sf(abs(z))))
            )
    return rows


def _ve_rows(rep):
    return [
        (r.cause, r.ve, r.se_ve, r.ci_low, r.ci_high) for r in rep.rows
    ]


def _vd_rows(rep):
    return [
        (p.cause_num, p.cause_den, p.ratio, p.se, p.ci_low, p.ci_high)
        for p in rep.pairs
    ]


_COEF_HEADER = ("cause", "covariate", "estimate", "se", "z", "p_value")
_VE_HEADER = ("cause", "ve", "se", "ci_low", "ci_high")
_VD_HEADER = ("cause_num", "cause_den", "ratio", "se", "ci_low", "ci_high")
_TEST_HEADER = ("family", "test", "statistic", "critical", "p_value", "reject", "tail")
_STRAIN_HEADER = ("family", "variant", "cause", "statistic", "p_raw", "p_adjusted", "reject")


def _fit_payload(ds, fit, var, warnings):
    payload = {
        "kind": "fit",
        "method": fit.method,
        "n": ds.n,
        "n_causes": ds.n_causes,
        "n_strata": ds.n_strata,
        "covariates": list(fit.covariate_names),
        "converged": fit.converged,
        "n_iter": fit.n_iter,
        "score_max": fit.score_max,
        "curvature_fallbacks": fit.curvature_fallbacks,
        "warnings": warnings,
    }
    if fit.completeness is not None:
        cm = fit.completeness
        payload["completeness"] = {
            "features": list(cm.feature_names),
            # None marks a degenerate group (no failures / none incomplete)
            "coef": {
                str(k): None if v is None else list(v) for k, v in cm.coef.items()
            },
            "min_fitted": cm.min_fitted,
            "floor_count": cm.floor_count,
            "pooled": cm.pooled,
        }
    if fit.cause_model is not None:
        rm = fit.cause_model
        payload["cause_model"] = {
            "features": list(rm.feature_names),
            "coef": {
                str(k): None if v is None else np.asarray(v).tolist()
                for k, v in rm.coef.items()
            },
            "modeled_causes": list(rm.modeled_causes),
            "pooled": rm.pooled,
        }
    if var.ipw_weight_mode is not None:
        payload["ipw_weight_mode"] = var.ipw_weight_mode
    return payload


def cmd_fit(o):
    from .estimation import breslow_baseline

    ds, fit, var, _structural, warnings = _load_fit(o)
    eff = efficacy_report(
        fit.beta[:, 0], var.cov_alpha, level=o["level"], ci_form=o["ci_form"]
    )
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)

    coef_rows = _coef_rows(fit, var)
    ve_rows, vd_rows = _ve_rows(eff), _vd_rows(eff)
    _write_csv(out / "coefficients.csv", _COEF_HEADER, coef_rows)
    _write_csv(out / "ve.csv", _VE_HEADER, ve_rows)
    if vd_rows:
        _write_csv(out / "vd.csv", _VD_HEADER, vd_rows)

    baseline_info = []
    for k in range(1, ds.n_strata + 1):
        for j in range(1, ds.n_causes + 1):
            bh = breslow_baseline(ds, fit, stratum=k, cause=j)
            rows = list(zip(bh.times, bh.jumps, np.cumsum(bh.jumps)))
            _write_csv(
                out / f"baseline_stratum{k}_cause{j}.csv",
                ("time", "increment", "cumulative"),
                rows,
            )
            baseline_info.append(
                {
                    "stratum": k,
                    "cause": j,
                    "n_jumps": len(bh.times),
                    "negative_jump_count": bh.negative_jump_count,
                }
            )

    payload = _fit_payload(ds, fit, var, warnings)
    payload.update(
        {
            "coefficients": [list(r) for r in coef_rows],
            "ve": [list(r) for r in ve_rows],
            "vd": [list(r) for r in vd_rows],
            "baselines": baseline_info,
            "level": o["level"],
            "ci_form": o["ci_form"],
        }
    )
    _write_json(out / "report.json", payload)
    Path(out / "report.txt").write_text(_render_text(payload))
    _write_json(out / "manifest.json", _manifest("fit", o))
    return 0


def cmd_test(o):
    if o["B"] < 1000:
        raise ConfigError("test commands need B >= 1000 draws")
    for fam in o["family"]:
        if fam not in ("threshold", "sieve"):
            raise ConfigError(f"unknown test family {fam!r}")
    ds, fit, var, _structural, warnings = _load_fit(o)
    eff = efficacy_report(
        fit.beta[:, 0], var.cov_alpha, level=o["level"], ci_form=o["ci_form"]
    )
    test_rows, strain_rows = [], []
    payload = _fit_payload(ds, fit, var, warnings)
    payload.update(
        {
            "kind": "test",
            "level": o["level"],
            "b_draws": o["B"],
            "seed": o["seed"],
            "ve_null": o["ve0"],
            "ve": [list(r) for r in _ve_rows(eff)],
        }
    )
    if "threshold" in o["family"]:
        rep = threshold_tests(
            fit.beta[:, 0],
            var.cov_alpha,
            ve_null=o["ve0"],
            level=o["level"],
            b_draws=o["B"],
            seed=o["seed"],
            causes=o["causes"],
        )
        for key in ("min", "sum"):
            t = rep.overall[key]
            test_rows.append(
                ("threshold", t.name, t.statistic, t.critical, t.p_value, t.reject, t.tail)
            )
        for variant, group in (
            ("one_sided", rep.per_cause_one_sided),
            ("squared", rep.per_cause_squared),
        ):
            for pc in group:
                strain_rows.append(
                    (
                        "threshold",
                        variant,
                        pc.cause,
                        pc.statistic,
                        pc.p_raw,
                        pc.p_adjusted,
                        pc.reject,
                    )
                )
        payload["threshold"] = _test_report_payload(rep)
    if "sieve" in o["family"]:
        rep = sieve_tests(
            fit.beta[:, 0],
            var.cov_alpha,
            level=o["level"],
            b_draws=o["B"],
            seed=o["seed"],
            causes=o["causes"],
        )
        for key in ("min", "sum"):
            t = rep.overall[key]
            test_rows.append(
                ("sieve", t.name, t.statistic, t.critical, t.p_value, t.reject, t.tail)
            )
        payload["sieve"] = _test_report_payload(rep)

    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "tests.csv", _TEST_HEADER, test_rows)
    if strain_rows:
        _write_csv(out / "per_strain.csv", _STRAIN_HEADER, strain_rows)
    _write_csv(out / "ve.csv", _VE_HEADER, _ve_rows(eff))
    payload["tests"] = [list(r) for r in test_rows]
    payload["per_strain"] = [list(r) for r in strain_rows]
    _write_json(out / "report.json", payload)
    Path(out / "report.txt").write_text(_render_text(payload))
    _write_json(out / "manifest.json", _manifest("test", o))
    return 0


def _test_report_payload(rep):
    body = {
        "family": rep.family,
        "causes": list(rep.causes),
        "overall": {
            key: asdict(t) for key, t in rep.overall.items()
        },
    }
    if rep.per_cause_one_sided:
        body["per_cause_one_sided"] = [asdict(p) for p in rep.per_cause_one_sided]
    if rep.per_cause_squared:
        body["per_cause_squared"] = [asdict(p) for p in rep.per_cause_squared]
    if rep.ve_null is not None:
        body["ve_null"] = rep.ve_null
    return body


def cmd_simulate(o):
    if o["scenario"] not in SCENARIOS:
        raise ConfigError(f"--scenario must be one of {sorted(SCENARIOS)}")
    if o["aux"] not in AUX_LEVELS:
        try:
            float(o["aux"])
        except ValueError:
            raise ConfigError(
                f"--aux must be one of {sorted(AUX_LEVELS)} or a number"
            ) from None
    for m in o["methods"]:
        if m not in _METHODS:
            raise ConfigError(f"unknown method {m!r} in --methods")
    cfg = scenario(o["scenario"], aux=o["aux"], n=o["n"])
    summary = run_study(
        cfg,
        n_reps=o["n_reps"],
        methods=o["methods"],
        seed=o["seed"],
        tests=o["tests"],
        test_method=o["test_method"],
        ve_null=o["ve0"],
        level=o["level"],
        b_draws=o["B"],
        ipw_weight_mode=o["ipw_weight_mode"],
        n_jobs=o["n_jobs"],
        max_failure_rate=o["max_failure_rate"],
    )
    _write_simulate_outputs(o, summary)
    return 0


def _write_simulate_outputs(o, summary):
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    est_rows = [
        (method, param, s["truth"], s["bias"], s["sse"], s["ese"], s["coverage"])
        for method, params in summary.estimators.items()
        for param, s in params.items()
    ]
    test_rows = sorted(summary.tests.items())
    _write_csv(
        out / "estimator_summary.csv",
        ("method", "param", "truth", "bias", "sse", "ese", "coverage"),
        est_rows,
    )
    _write_csv(out / "test_summary.csv", ("test", "rejection_rate"), test_rows)
    payload = {"kind": "simulate", **asdict(summary)}
    _write_json(out / "report.json", payload)
    Path(out / "report.txt").write_text(_render_text(payload))
    _write_json(
        out / "manifest.json",
        _manifest(
            "simulate",
            o,
            extra={
                "censoring_rate": summary.scenario["censoring_rate"],
                "n_failed": summary.n_failed,
            },
        ),
    )


def cmd_report(o):
    if not o["run"]:
        raise ConfigError("--run is required: a directory holding report.json")
    path = Path(o["run"]) / "report.json"
    if not path.exists():
        raise DataError(f"no report.json under {o['run']}")
    payload = json.loads(path.read_text())
    sys.stdout.write(_render_text(payload))
    return 0


def _render_text(payload):
    kind = payload.get("kind", "fit")
    parts = []
    if kind in ("fit", "test"):
        parts.append(
            f"method={payload['method']}  n={payload['n']}  "
            f"causes={payload['n_causes']}  strata={payload['n_strata']}  "
            f"converged={_fmt(payload['converged'])}\n\n"
        )
        if "coefficients" in payload:
            parts.append(
                _text_table("Coefficients", _COEF_HEADER, payload["coefficients"])
                + "\n"
            )
        if payload.get("ve"):
            parts.append(_text_table("Efficacy by cause", _VE_HEADER, payload["ve"]) + "\n")
        if payload.get("vd"):
            parts.append(
                _text_table("Pairwise hazard-ratio ratios", _VD_HEADER, payload["vd"])
                + "\n"
            )
        if payload.get("tests"):
            parts.append(_text_table("Tests", _TEST_HEADER, payload["tests"]) + "\n")
        if payload.get("per_strain"):
            parts.append(
                _text_table("Per-cause tests", _STRAIN_HEADER, payload["per_strain"])
                + "\n"
            )
        if payload.get("warnings"):
            parts.append("Warnings\n--------\n")
            parts.extend(f"- {w}\n" for w in payload["warnings"])
    elif kind == "simulate":
        sc = payload["scenario"]
        parts.append(
            f"replicates={payload['n_reps']} (failed {payload['n_failed']})  "
            f"seed={payload['seed']}  n={sc['n']}  alpha={sc['alpha']}  "
            f"aux={sc['aux_strength']}  censoring_rate={_fmt(sc['censoring_rate'])}\n\n"
        )
        rows = [
            (method, param, s["truth"], s["bias"], s["sse"], s["ese"], s["coverage"])
            for method, params in payload["estimators"].items()
            for param, s in params.items()
        ]
        parts.append(
            _text_table(
                "Estimator summary",
                ("method", "param", "truth", "bias", "sse", "ese", "coverage"),
                rows,
            )
            + "\n"
        )
        if payload.get("tests"):
            parts.append(
                _text_table(
                    "Test rejection rates",
                    ("test", "rejection_rate"),
                    sorted(payload["tests"].items()),
                )
            )
    return "".join(parts)


_COMMANDS = {
    "fit": cmd_fit,
    "test": cmd_test,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        options = _resolve(args, args.command)
        if "level" in options and not 0 < options["level"] < 1:
            raise ConfigError("level must be in (0, 1)")
        return _COMMANDS[args.command](options)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except VesieveError as exc:  # any other library failure
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
