"""Smoke test for the edge_moe_py extension module.

Build first with `pip install --no-build-isolation -e crates/py`.
"""

import json
import math
import os
import sys
import tempfile

import edge_moe_py as em


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    # Quantiles and the expert threshold.
    assert close(em.inverse_normal_cdf(0.975), 1.959963984540054, 1e-9)
    assert close(em.normal_cdf(em.inverse_normal_cdf(0.3)), 0.3, 1e-12)
    m_th, recommended = em.expert_threshold(10)
    assert close(m_th, 2.5605, 5e-4), m_th
    assert recommended >= 1
    assert em.convergence_time(0.2, 0.6, 30) > 10

    # Minimum-norm update interpolates the data.
    prev = [0.5, -1.0, 2.0, 0.0]
    features = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, -0.5]]
    labels = [1.0, -2.0]
    w = em.min_norm_update(prev, features, labels)
    assert em.training_loss(w, features, labels) < 1e-20
    assert em.model_error(w, w) == 0.0

    pi = em.softmax([1.0, 2.0, 3.0])
    assert close(sum(pi), 1.0, 1e-12) and pi[2] > pi[1] > pi[0]

    clusters = em.ClusterSet.generate(4, 12, 0.5, seed=3)
    assert clusters.check()
    assert len(clusters.signals) == 4 and len(clusters.centers[0]) == 12
    assert clusters.gap_expectation() > 0.0

    # A short simulation.
    cfg = em.RunConfig(horizon=300, experts=8, clusters=3, dim=10, samples=5, sigma0=0.5, seed=1)
    trace = em.run(cfg)
    again = em.run(cfg)
    assert trace.final_error == again.final_error
    assert trace.metrics == again.metrics
    assert sum(trace.update_counts) == trace.completion_count
    assert len(trace.routes()) == 300
    assert len(trace.expert_set_assignment()) == 8
    assert 0.0 <= trace.mutual_information()
    report = trace.error_report(stride=50)
    assert math.isfinite(report["final_error"])

    bench = em.run(em.RunConfig(horizon=300, experts=8, clusters=3, dim=10, samples=5,
                                sigma0=0.5, seed=1, strategy="nearest_available"))
    assert all(x == 0.0 for row in bench.gating_params for x in row)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "trace.jsonl")
        trace.write_jsonl(path)
        with open(path) as f:
            first = json.loads(f.readline())
        assert isinstance(first, dict)

    try:
        em.RunConfig(samples=20, dim=15)
    except ValueError:
        pass
    else:
        raise AssertionError("oversized sample count accepted")

    failed = [name for name, ok, _, _ in em.verify_suite(instances=20) if not ok]
    assert not failed, failed

    print("smoke test ok:", cfg, "final error %.4f" % trace.final_error)
    return 0


if __name__ == "__main__":
    sys.exit(main())
