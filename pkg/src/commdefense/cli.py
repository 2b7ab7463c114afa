"""Command-line entry point.

Subcommands: train, build-dataset, train-estimator, evaluate, ablate, plot,
gradcheck. Every subcommand accepts --config and --seed; --seed overrides
the config's seed. Exit codes: 0 success, 1 failure with a diagnostic,
2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import configio, nn
from .agents import AgentConfig, CommPolicy
from .envs import EnvConfig, make_env
from .errors import CommDefenseError
from .evaluation import EvalSpec, ablation, evaluate, write_results
from .reliability import ReliabilityDataset, build_dataset, train_estimator
from .training import (
    Bundle,
    bundle_metadata,
    load_bundle,
    save_bundle,
    train_full_pipeline,
    train_stage1,
)

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="commdefense",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("train", help="stage-1 policy training or the full pipeline")
    common(p)
    p.add_argument("--out", required=True, help="output checkpoint bundle directory")
    p.add_argument("--stage1-only", action="store_true",
                   help="skip dataset generation and estimator training")

    p = sub.add_parser("build-dataset", help="stage-2 reliability dataset from a bundle")
    common(p)
    p.add_argument("--checkpoint", required=True, help="trained bundle directory")
    p.add_argument("--out", required=True, help="output dataset file")

    p = sub.add_parser("train-estimator", help="stage-3 estimator training")
    common(p)
    p.add_argument("--checkpoint", required=True, help="bundle directory to extend")
    p.add_argument("--dataset", required=True, help="reliability dataset file")
    p.add_argument("--out", default=None, help="output bundle (default: in place)")

    p = sub.add_parser("evaluate", help="attack sweep on a trained bundle")
    common(p)

    p = sub.add_parser("ablate", help="four-way defense comparison at fixed p")
    common(p)

    p = sub.add_parser("plot", help="render charts from a results CSV")
    common(p, config_required=False)
    p.add_argument("--csv", required=True, help="results CSV from evaluate/ablate")
    p.add_argument("--outdir", required=True, help="chart output directory")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p, config_required=False)
    return parser


def _load(args, keys, context):
    mapping = configio.read_config(args.config)
    configio.check_known(mapping, keys, context)
    if args.seed is not None:
        mapping["seed"] = args.seed
    return mapping


def _cmd_train(args) -> int:
    mapping = _load(args, configio.ENV_KEYS | configio.AGENT_KEYS | configio.TRAIN_KEYS,
                    "train")
    env_cfg = configio.env_config_from(mapping)
    agent_cfg = configio.agent_config_from(mapping)
    train_cfg = configio.train_config_from(mapping)
    env = make_env(env_cfg)
    if args.stage1_only:
        core, value_net, history = train_stage1(env, agent_cfg, train_cfg)
        meta = bundle_metadata(env, core, agent_cfg, train_cfg, history)
        bundle = Bundle(core=core, value_net=value_net, estimator=None, metadata=meta)
    else:
        bundle = train_full_pipeline(env, agent_cfg, train_cfg)
    save_bundle(bundle, args.out)
    print(f"saved checkpoint bundle to {args.out}")
    return 0


def _cmd_build_dataset(args) -> int:
    mapping = _load(args, configio.ENV_KEYS | configio.AGENT_KEYS | configio.TRAIN_KEYS,
                    "build-dataset")
    bundle = load_bundle(args.checkpoint)
    env_cfg = configio.env_config_from(mapping, EnvConfig(**bundle.metadata["env"]))
    train_cfg = configio.train_config_from(mapping)
    env = make_env(env_cfg)
    n = env.n_agents
    steps = max(1, -(-train_cfg.dataset_size // (n * (n - 1))))
    dataset = build_dataset(bundle.core, env, steps, train_cfg.p_a, train_cfg.p_b,
                            lam=train_cfg.stage2_lambda, seed=train_cfg.seed)
    dataset.save(args.out)
    print(f"wrote {len(dataset)} samples to {args.out}")
    return 0


def _cmd_train_estimator(args) -> int:
    mapping = _load(args, configio.ENV_KEYS | configio.AGENT_KEYS | configio.TRAIN_KEYS,
                    "train-estimator")
    train_cfg = configio.train_config_from(mapping)
    bundle = load_bundle(args.checkpoint)
    dataset = ReliabilityDataset.load(args.dataset)
    estimator, metrics = train_estimator(
        dataset, epochs=train_cfg.estimator_epochs, batch_size=train_cfg.estimator_batch,
        lr=train_cfg.estimator_lr, hidden_size=bundle.metadata["hidden_size"],
        seed=train_cfg.seed)
    bundle.estimator = estimator
    bundle.metadata["estimator_metrics"] = {
        k: v for k, v in metrics.items() if k != "losses"}
    out = args.out or args.checkpoint
    save_bundle(bundle, out)
    print(f"estimator recall {metrics['recall']:.3f} precision {metrics['precision']:.3f}; "
          f"bundle saved to {out}")
    return 0


def _eval_attacks(mapping) -> list:
    kinds = configio.as_list(mapping.get("attacks", "none"))
    strengths = {k: mapping[k] for k in
                 ("objective", "sigma", "eta", "epsilon", "pgd_steps", "mc_candidates",
                  "lambda", "clip") if k in mapping}
    specs = []
    for kind in kinds:
        specs.append(configio.attack_spec_from({"attack": kind, **strengths}))
    return specs


def _cmd_evaluate(args) -> int:
    mapping = _load(args, configio.EVAL_KEYS | configio.ENV_KEYS, "evaluate")
    bundle = load_bundle(mapping["checkpoint"])
    env_cfg = configio.env_config_from(mapping, EnvConfig(**bundle.metadata["env"]))
    spec = EvalSpec(
        bundle=bundle, env_cfg=env_cfg, attacks=_eval_attacks(mapping),
        p_grid=[float(p) for p in configio.as_list(mapping.get("p_grid", [0, 0.1, 0.2, 0.3, 0.4, 0.5]))],
        episodes=int(mapping.get("episodes", 200)),
        defense=str(mapping.get("defense", "none")),
        seeds=tuple(configio.as_list(mapping.get("seeds", mapping.get("seed", 0)))),
    )
    rows = evaluate(spec)
    out_csv = mapping.get("out_csv", "results.csv")
    write_results(rows, out_csv)
    print(f"wrote {len(rows)} result rows to {out_csv}")
    if "plot_dir" in mapping:
        from .plotting import plot
        paths = plot(rows, mapping["plot_dir"])
        print(f"wrote {len(paths)} charts to {mapping['plot_dir']}")
    return 0


def _cmd_ablate(args) -> int:
    mapping = _load(args, configio.EVAL_KEYS | configio.ENV_KEYS, "ablate")
    bundle = load_bundle(mapping["checkpoint"])
    attention_bundle = load_bundle(mapping["attention_checkpoint"])
    env_cfg = configio.env_config_from(mapping, EnvConfig(**bundle.metadata["env"]))
    rows = ablation(
        bundle, attention_bundle, env_cfg, _eval_attacks(mapping),
        p=float(mapping.get("p", 0.3)), episodes=int(mapping.get("episodes", 200)),
        seeds=tuple(configio.as_list(mapping.get("seeds", mapping.get("seed", 0)))))
    out_csv = mapping.get("out_csv", "ablation.csv")
    write_results(rows, out_csv)
    print(f"wrote {len(rows)} result rows to {out_csv}")
    return 0


def _cmd_plot(args) -> int:
    from .evaluation import read_results
    from .plotting import plot
    rows = read_results(args.csv)
    paths = plot(rows, args.outdir)
    print(f"wrote {len(paths)} charts to {args.outdir}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .attacks import StepContext, objective_A, objective_B
    from .training import PolicyBatch, policy_loss

    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}

    store = nn.ParamStore()
    dense = nn.Dense(store, "d", 6, 4, "relu", rng)
    x = rng.normal(size=(3, 6))
    mix = rng.normal(size=(3, 4))
    worst["dense"] = nn.grad_check(
        lambda: nn.sum_all(nn.mul(dense(nn.Tensor(x)), nn.Tensor(mix))), store.tensors())

    gstore = nn.ParamStore()
    gru = nn.GRUCell(gstore, "g", 5, 6, rng)
    gx, gh = rng.normal(size=(2, 5)), rng.normal(size=(2, 6))
    gmix = rng.normal(size=(2, 6))
    worst["gru"] = nn.grad_check(
        lambda: nn.sum_all(nn.mul(gru(nn.Tensor(gx), nn.Tensor(gh)), nn.Tensor(gmix))),
        gstore.tensors())

    sstore = nn.ParamStore()
    l1 = nn.Dense(sstore, "l1", 5, 6, "relu", rng)
    l2 = nn.Dense(sstore, "l2", 6, 3, "linear", rng)
    sx = rng.normal(size=(4, 5))
    labels = rng.integers(0, 3, size=4)
    worst["softmax_xent"] = nn.grad_check(
        lambda: nn.cross_entropy(nn.softmax(l2(l1(nn.Tensor(sx)))), labels),
        sstore.tensors())

    core = CommPolicy(5, 4, 3, hidden_size=6, rng=rng)
    n, rows = 3, 2
    b = rows * n
    h_prev = rng.normal(size=(b, 6))
    obs = rng.normal(size=(b, 5))
    actions = rng.integers(0, 4, size=b)
    from .agents import pair_indices
    recv, send = pair_indices(n)
    send_rows = (np.arange(rows)[:, None] * n + send[None, :]).reshape(-1)
    batch = PolicyBatch(
        obs=obs, h_prev=h_prev, actions=actions, weights=rng.normal(size=b) * 0.5,
        n_agents=n, learned_messages=True,
        pair_stored=np.zeros((rows * n * (n - 1), 3)),
        pair_const_mask=np.zeros((rows * n * (n - 1), 1)),
        pair_send_rows=send_rows,
        null_pair=np.zeros(rows * n * (n - 1), dtype=bool),
        pair_weights=np.ones(rows * n * (n - 1)))
    worst["policy_loss"] = nn.grad_check(lambda: policy_loss(core, batch),
                                         core.store.tensors(), step=1e-4)

    h = rng.normal(size=(n, 6))
    o = rng.normal(size=(n, 5))
    e = core.embed_obs(o).data
    broadcast = rng.uniform(-1, 1, (n, 3))
    ctx = StepContext(core, h, e, broadcast, np.zeros(n, dtype=bool))
    view = ctx.view(0, range(n))
    for name, fn in (("objective_A", objective_A), ("objective_B", objective_B)):
        cand = nn.Tensor(broadcast[0] * 0.7, requires_grad=True)
        with nn.Tape(grad_params=False) as tape:
            out = fn(view, cand)
        nn.backward(tape, out)
        analytic = cand.grad.copy()
        payload = broadcast[0] * 0.7
        numeric = np.zeros_like(payload)
        for i in range(len(payload)):
            delta = np.zeros_like(payload)
            delta[i] = 1e-5
            fp = float(fn(view, nn.Tensor(payload + delta)).data)
            fm = float(fn(view, nn.Tensor(payload - delta)).data)
            numeric[i] = (fp - fm) / 2e-5
        err = np.max(np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12))
        worst[name] = float(err)

    ok = True
    for name, err in worst.items():
        tol = 1e-4 if name.startswith("objective") or name == "policy_loss" else 1e-5
        status = "ok" if err <= tol else "FAIL"
        ok &= err <= tol
        print(f"{name:14s} max rel err {err:.3e} (tol {tol:.0e}) {status}")
    return 0 if ok else 1


_COMMANDS = {
    "train": _cmd_train,
    "build-dataset": _cmd_build_dataset,
    "train-estimator": _cmd_train_estimator,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "plot": _cmd_plot,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CommDefenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
