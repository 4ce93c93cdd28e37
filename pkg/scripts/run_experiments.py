"""Run the desk-scale experiments and write one summary CSV per experiment.

    python3 scripts/run_experiments.py --out results            # everything
    python3 scripts/run_experiments.py --out results --only ada sweep
"""
import argparse
import os
import time

import numpy as np

from advlab import experiments as E

NAMES = ("ada", "sweep", "ci", "scan", "re")


def run_ada(out, seeds):
    runs = E.ada_detection_echo(seeds=seeds)
    with open(os.path.join(out, "ada_echo.csv"), "w") as f:
        f.write("seed,accuracy,attack_success,ada_auc,confidence_auc\n")
        for r in runs:
            f.write(f"{r.seed},{r.accuracy!r},{r.attack_success!r},{r.ada_auc!r},{r.confidence_auc!r}\n")
    return (f"mean AUC ADA {np.mean([r.ada_auc for r in runs]):.3f}, "
            f"confidence {np.mean([r.confidence_auc for r in runs]):.3f}")


def run_sweep(out, seeds):
    runs = E.strength_tradeoff(seeds=seeds)
    with open(os.path.join(out, "strength_sweep.csv"), "w") as f:
        f.write("seed,strength,misclassified,detected,effective,mean_score\n")
        for r in runs:
            for row in r.curve.rows():
                f.write(f"{r.seed}," + ",".join(repr(float(v)) for v in row) + "\n")
    return (f"ADA steps up {[r.ada_steps_up for r in runs]}, effective curve non-monotone in "
            f"{sum(not r.effective_monotone for r in runs)}/{len(runs)} seeds")


def run_ci(out, seeds):
    runs = E.ci_backdoor_echo(seeds=seeds)
    with open(os.path.join(out, "ci_echo.csv"), "w") as f:
        f.write("seed,n_train,n_poison,clean_accuracy,poisoned_accuracy,baseline_success,attack_success,"
                "ci_tp,ci_fp,ss_tp,ss_fp,retrained_accuracy,residual_success\n")
        for r in runs:
            f.write(f"{r.seed},{r.n_train},{r.n_poison},{r.clean_accuracy!r},{r.poisoned_accuracy!r},"
                    f"{r.baseline_success!r},{r.attack_success!r},{r.ci_tp},{r.ci_fp},{r.ss_tp},{r.ss_fp},"
                    f"{r.retrained_accuracy!r},{r.residual_success!r}\n")
    ci, ss = E.pooled_rates(runs, "ci"), E.pooled_rates(runs, "ss")
    return f"CI TPR/FPR {ci[0]:.3f}/{ci[1]:.4f}, SS TPR/FPR {ss[0]:.3f}/{ss[1]:.3f}"


def run_scan(out, seeds):
    runs = E.scan_calibration(seeds=seeds)
    with open(os.path.join(out, "scan_calibration.csv"), "w") as f:
        f.write("seed,backdoored,true_source,true_target,attack_success,attacked,pair_source,pair_target,"
                "statistic,p_value\n")
        for r in runs:
            v = r.verdict
            ts, tt = r.true_pair if r.true_pair else (-1, -1)
            ps, pt = v.pair if v.pair else (-1, -1)
            f.write(f"{r.seed},{int(r.backdoored)},{ts},{tt},{r.attack_success!r},{int(v.attacked)},"
                    f"{ps},{pt},{float(v.statistic)!r},{float(v.p_value)!r}\n")
    clean = [r for r in runs if not r.backdoored]
    bd = [r for r in runs if r.backdoored]
    return (f"false detections {sum(r.verdict.attacked for r in clean)}/{len(clean)}, "
            f"correct detections {sum(r.verdict.attacked and r.target_correct for r in bd)}/{len(bd)}")


def run_re(out, seeds):
    runs = E.re_pipeline(seeds=seeds)
    with open(os.path.join(out, "re_pipeline.csv"), "w") as f:
        f.write("seed,final_agreement,single_auc,batch_size,batch_auc,transfer_targeted,transfer_untargeted\n")
        for r in runs:
            for b, auc in sorted(r.batch_auc.items()):
                f.write(f"{r.seed},{float(r.agreement[-1])!r},{r.single_auc!r},{b},{auc!r},"
                        f"{r.transfer.targeted!r},{r.transfer.untargeted!r}\n")
    return f"query schedule {runs[0].crafted}, single AUC {np.mean([r.single_auc for r in runs]):.3f}"


RUNNERS = {"ada": (run_ada, 5), "sweep": (run_sweep, 10), "ci": (run_ci, 10), "scan": (run_scan, 10),
           "re": (run_re, 3)}


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="results")
    p.add_argument("--only", nargs="*", choices=NAMES, default=list(NAMES))
    p.add_argument("--seeds", type=int, help="override the number of seeds")
    args = p.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for name in args.only:
        fn, n = RUNNERS[name]
        t0 = time.time()
        summary = fn(args.out, range(args.seeds or n))
        print(f"{name}: {summary} ({time.time() - t0:.0f} s)", flush=True)


if __name__ == "__main__":
    main()
