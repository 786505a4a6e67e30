"""Ensembles of cascade paths and what their stopping times say.

Three regimes: the default small-noise run, where nothing stops; a datum as
large as half the threshold, where level 0 trips often; and large noise,
where stops before T appear and the energy constant grows with T.
Pass ``--paths`` to trade accuracy for time (about 0.6 s per path).
"""
import argparse

from snse.harness import RunConfig, analyze, run_ensemble


def summarize(label, config):
    report = analyze(config, run_ensemble(config), min_markov_paths=config.paths)
    checks = report["checks"]
    print(f"\n{label}: {report['paths']} paths, P(tau < T) = {report['p_stop']:.3f}")
    m0 = checks["markov_level0_0"]
    print(f"  level 0 exceedances {m0['count']}, Wilson upper {m0['wilson'][1]:.4f} "
          f"vs budget {m0['budget']:.4f} -> {m0['status']}")
    head = checks["headline"]
    print("  energy constant over horizons "
          + ", ".join(f"T={t:g}: {c:.2f}" for t, c in zip(head["horizons"], head["constants"])))
    pos = checks["positivity"]
    print("  P(tau < t0) on t0 = " + ", ".join(f"{t:.3g}" for t in pos["t0"]) + ": "
          + ", ".join(f"{p:.3f}" for p in pos["probabilities"]))
    print(f"  pointwise control {checks['pointwise_control']['status']}, "
          f"level energy spread {checks['level_energy']['spread']:.2f}")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--paths", type=int, default=40)
    args = parser.parse_args(argv)
    summarize("small noise", RunConfig(paths=args.paths))
    summarize("large datum", RunConfig(eps0=0.2, eps_bar=0.4, enforce_smallness=False, paths=args.paths))
    summarize("large noise", RunConfig(eps_sigma=2.5, mode="fixed-horizon", paths=args.paths))


if __name__ == "__main__":
    main()
