"""Stream a synthetic stroke recording through a model at real-time pace and print command changes.

Run with ``python3 demos/stream_replay.py [checkpoint.emgm]``. Without a checkpoint a randomly
initialized model is used, which is enough to see the pipeline timing.
"""
import sys

from emgadapt import datagen, stream
from emgadapt.model import Model, ModelConfig, NormStats, init_params, load_checkpoint

NAMES = {0: "relax", 1: "open", 2: "close"}


def main():
    if len(sys.argv) > 1:
        model = load_checkpoint(sys.argv[1])
    else:
        cfg = ModelConfig()
        model = Model(init_params(cfg, 0), cfg, NormStats.identity(cfg.channels))
    prof = datagen.sample_subject("stroke", 0.5, 1, subject_id="demo")
    rec = datagen.synthesize(prof, datagen.make_set_timeline("standard"), 2)
    short = datagen.Recording(rec.samples[:2000], rec.labels[:2000])

    last = [None]

    def sink(ev):
        if ev.cls != last[0]:
            print(f"t={ev.sample_index / 200:6.2f}s  {NAMES[ev.cls]}")
            last[0] = ev.cls

    report = stream.run_stream(model, stream.StreamConfig(realtime_factor=1.0), stream.replay_source(short, 1.0),
                               sink=sink)
    d = report.to_dict()
    print(f"\n{d['n_samples']} samples, drops {d['drops']}, achieved factor {d['achieved_factor']:.3f}, "
          f"p99 latency {d['latency_us']['p99'] / 1000:.2f} ms")


if __name__ == "__main__":
    main()
