"""Command line interface.

Exit codes: 0 on a completed run, 1 on a usage error, 2 on an I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .certificate import DivergenceError, build_certificate, verify_kkt
from .conditions import check_conditions
from .core import ParameterError, ShapeError, generate_mask
from .io import format_kv, read_mask, read_matrix, write_mask, write_matrix
from .solver import SolverConfig, solve_rmc, theorem_lambda

TRIAL_BASE = 1 << 20


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_mask(text: str, rate: float | None) -> tuple[str, dict]:
    """``full``, ``bernoulli``, ``decimation:M``, ``block:B`` or ``file:PATH``."""
    kind, _, arg = text.partition(":")
    if kind == "full":
        return "full", {}
    if kind == "bernoulli":
        return "bernoulli", {"rate": 0.6 if rate is None else rate}
    if kind == "decimation":
        return "decimation", {"m": int(arg)}
    if kind == "block":
        return "block", {"b": int(arg)}
    if kind == "file":
        return "file", {"path": arg}
    raise UsageError(f"unknown mask {text!r}")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _lambda(text: str):
    return "theorem" if text == "theorem" else float(text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--n", type=int, default=20)
    common.add_argument("--rank", type=int, default=1)
    common.add_argument("--rho", default="0.0",
                        help="corruption probability (comma list for sweep)")
    common.add_argument("--mask", default="bernoulli",
                        help="full | bernoulli | decimation:M | block:B | file:PATH")
    common.add_argument("--rate", default=None,
                        help="bernoulli sampling rate (comma list for sweep)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--lambda", dest="lam", default="theorem",
                        help="'theorem' for 1/sqrt(n log n), or a positive value")
    common.add_argument("--out", default=None)
    common.add_argument("--threads", type=int, default=None,
                        help="worker processes (falls back to RMCDS_THREADS)")
    common.add_argument("--success-tol", type=float, default=1e-4)
    common.add_argument("--basis", choices=("gaussian", "sign"), default="gaussian")
    common.add_argument("--max-iters", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="rmcds", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    sub.add_parser("gen-mask", parents=[common], help="write a mask file")
    sub.add_parser("check", parents=[common], help="evaluate recovery conditions")
    s = sub.add_parser("solve", parents=[common], help="solve the recovery program")
    s.add_argument("--input", default=None, help="CSV matrix of observed values")
    sub.add_parser("certify", parents=[common], help="build and verify a dual certificate")
    sw = sub.add_parser("sweep", parents=[common], help="phase-transition sweep")
    sw.add_argument("--trials", type=int, default=1, help="trials per grid cell")
    sw.add_argument("--timing", action="store_true", help="add a wall_time column")
    sub.add_parser("verify", parents=[common], help="certificate vs solver cross-check")
    return p


def _spec(args, single: bool = True) -> harness.ExperimentSpec:
    rates = _floats(args.rate) if args.rate else [None]
    rhos = _floats(args.rho)
    if single and (len(rates) > 1 or len(rhos) > 1):
        raise UsageError("lists for --rho/--rate are only accepted by sweep")
    kind, params = parse_mask(args.mask, rates[0])
    solver = {"max_iters": args.max_iters} if args.max_iters else {}
    return harness.ExperimentSpec(
        n=args.n, r=args.rank, rho=rhos[0] if rhos else 0.0, mask_kind=kind,
        mask_params=params, lambda_mode=_lambda(args.lam), seeds=[args.seed],
        solver=solver, out=args.out, basis=args.basis, success_tol=args.success_tol)


def _emit(text: str, out: str | None):
    if out:
        harness.write_text(out, text)
    else:
        sys.stdout.write(text)


def cmd_gen_mask(args):
    spec = _spec(args)
    params = dict(spec.mask_params)
    if spec.mask_kind == "bernoulli":
        params["seed"] = args.seed
    mask = generate_mask(spec.n, spec.mask_kind, **params)
    if args.out:
        write_mask(mask, args.out)
    else:
        sys.stdout.write(f"n {mask.n}\n" + "".join(f"{i} {j}\n" for i, j in mask.pairs()))


def cmd_check(args):
    spec = _spec(args)
    inst = harness.build_instance(spec, args.seed)
    rep = check_conditions(inst.model, inst.mask, inst.corruption,
                           harness._condition_config(spec, args.seed))
    if args.out:
        harness.write_text(args.out, rep.csv_header() + "\n" + rep.csv_row() + "\n")
    sys.stdout.write(rep.to_text())


def cmd_solve(args):
    spec = _spec(args)
    if args.input:
        Y = read_matrix(args.input)
        if spec.mask_kind != "file":
            raise UsageError("--input needs --mask file:PATH")
        mask = read_mask(spec.mask_params["path"])
        if mask.n != Y.shape[0]:
            raise UsageError("mask and matrix sizes differ")
        truth = None
    else:
        inst = harness.build_instance(spec, args.seed)
        Y, mask, truth = inst.Y, inst.mask, inst
    lam = theorem_lambda(mask.n) if spec.lambda_mode == "theorem" else float(spec.lambda_mode)
    res = solve_rmc(Y, mask, SolverConfig(lam=lam, seed=args.seed, **spec.solver))
    info = res.summary()
    if truth is not None:
        L0 = truth.model.L0
        info["rel_error"] = float(np.linalg.norm(res.L_star - L0) / np.linalg.norm(L0))
        info["success"] = bool(res.converged and info["rel_error"] <= spec.success_tol)
    text = format_kv(info)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        harness.write_text(out / "result.txt", text)
        write_matrix(res.L_star, out / "L_star.csv")
        write_matrix(res.S_star, out / "S_star.csv")
    sys.stdout.write(text)


def cmd_certify(args):
    spec = _spec(args)
    inst = harness.build_instance(spec, args.seed)
    lam = spec.lam()
    T = inst.model.tangent()
    c = inst.corruption
    try:
        cert = build_certificate(T, inst.mask, c.support, c.Sigma0_bar, lam,
                                 seed=harness.substream_seed(args.seed, harness.ESTIMATOR),
                                 rho=c.rho)
    except DivergenceError as exc:
        sys.stdout.write(format_kv({"pass": False, "status": f"certificate: {exc}"}))
        return
    rep = verify_kkt(cert.Lambda, T, c.V_set, c.N_set, lam, Sigma_bar=c.Sigma0_bar)
    if args.out:
        from .certificate import KKT_FIELDS

        harness.write_text(args.out, ",".join(KKT_FIELDS) + "\n" + rep.csv_row() + "\n")
    extra = {"k_golf": cert.k_golf, "eta": cert.eta, "neumann_terms": cert.neumann_terms,
             "golf_final_D": cert.golfing.D_norms[-1]}
    sys.stdout.write(rep.to_text() + format_kv(extra))


def cmd_sweep(args):
    spec = _spec(args, single=False)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    spec.seeds = [harness.substream_seed(args.seed, TRIAL_BASE + j) % (2 ** 63)
                  for j in range(args.trials)]
    rhos = _floats(args.rho)
    rates = _floats(args.rate) if args.rate else [spec.rate]
    if not rhos or not rates:
        raise UsageError("sweep grid is empty")
    res = harness.run_sweep(spec, rhos=rhos, rates=rates, ranks=[args.rank],
                            threads=args.threads)
    data = res.data_csv(timing=args.timing)
    summary = res.summary_csv()
    if args.out:
        harness.write_text(args.out, data)
        out = Path(args.out)
        harness.write_text(out.with_name(out.stem + ".summary.csv"), summary)
    else:
        sys.stdout.write(data + "\n" + summary)
    sys.stderr.write(format_kv(res.trend))


def cmd_verify(args):
    spec = _spec(args)
    rep = harness.verify_pipeline(spec, args.seed)
    _emit(format_kv(harness.flatten(rep)), args.out)


COMMANDS = {"gen-mask": cmd_gen_mask, "check": cmd_check, "solve": cmd_solve,
            "certify": cmd_certify, "sweep": cmd_sweep, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.cmd](args)
    except (UsageError, ParameterError, ShapeError, DivergenceError, ValueError) as exc:
        sys.stderr.write(f"rmcds: error: {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"rmcds: I/O error: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
