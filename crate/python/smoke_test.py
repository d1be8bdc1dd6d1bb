"""End-to-end check of the Python bindings.

Build the extension first (see README), then run:

    python3 python/smoke_test.py
"""

import csv
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import kgeformer_py as kf


def main():
    with tempfile.TemporaryDirectory() as tmp:
        data, graph_path = kf.synthesize(tmp, length=1200, seed=3)
        graph = kf.Graph.load(graph_path)
        assert len(graph.nodes) == 7 and len(graph.edges) == 8, graph
        adj = graph.adjacency()
        assert sum(map(sum, adj)) == 8
        assert kf.Graph.parse(graph.serialize()).serialize() == graph.serialize()
        assert "nodes: 7" in kf.inspect_graph(graph_path, data)

        out = os.path.join(tmp, "run")
        cfg = kf.RunConfig(
            data=data, graph=graph_path, use_kge=True, seq_len=24, label_len=12,
            pred_len=8, d_model=16, n_heads=2, d_ff=32, max_steps=3, batch_size=8, out=out,
        )
        metrics = kf.train(cfg)
        assert metrics["use_kge"] and math.isfinite(metrics["mse"]), metrics

        ckpt = os.path.join(out, "checkpoint")
        assert kf.evaluate(ckpt, data) == metrics

        model = kf.Model.load(ckpt)
        assert model.config_hash == cfg.config_hash()
        assert model.kge_param_count() == 7 * 16 + (24 + 12 + 8) * 16
        with open(data) as f:
            rows = list(csv.reader(f))[1:]
        tail = rows[-model.lookback:]
        pred = model.forecast([[float(v) for v in r[1:]] for r in tail], [r[0] for r in tail])
        assert len(pred) == model.horizon and all(len(r) == 7 for r in pred)

        try:
            kf.RunConfig(no_such_key=1)
        except ValueError as e:
            assert "no_such_key" in str(e)
        else:
            raise AssertionError("unknown key accepted")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
