"""Small end-to-end run: synthesize data, pretrain, adapt to one stroke subject, compare variants.

Uses a reduced corpus and short schedules so it finishes in a few minutes on one core.
Run with ``python3 demos/quickstart.py``.
"""
from emgadapt import datagen, harness
from emgadapt.adaptation import TrainHyper

SEED = 0
HP = {"learning_rate": 2e-3, "epochs": 10, "stride": 100, "batch_size": 64}


def main():
    bench = datagen.build_benchmark(SEED, n_healthy=8, sets_per_healthy=2)
    print(f"healthy subjects: {len(bench.healthy)}, stroke subjects: {sorted(bench.stroke)}")
    healthy, res = harness.pretrain(bench.healthy_recordings(), seed=SEED,
                                    hyper=TrainHyper(lr=2e-3, epochs=3, stride=100, seed=SEED))
    print("pretraining loss:", " ".join(f"{x:.3f}" for x in res.loss_trace))

    subject = bench.stroke["S2"]
    print(f"\n{'variant':10s} {'raw':>6s} {'transition':>10s}")
    for variant in ("zero-shot", "scratch", "head-only", "lora", "full"):
        r = harness.final_train_eval(variant, HP, subject.train, subject.test, SEED, healthy)
        print(f"{r.variant:10s} {r.mean_raw:6.3f} {r.mean_transition:10.3f}")


if __name__ == "__main__":
    main()
