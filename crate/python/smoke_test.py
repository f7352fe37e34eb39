"""Smoke test for the compiled `raft` extension module.

Build and install first:  pip install -e crates/python --no-build-isolation
"""

import math

import raft


def main() -> None:
    print("raft", raft.__version__)

    synth = raft.synthesize(kind="rw", occurrences=2, seed=3, total_length=4000, n_patterns=2)
    series = synth["series"]
    assert len(series) == 4000
    assert len(synth["annotations"]) == 2 * 2 + 2
    assert all(region in ("train", "test") for *_, region in synth["annotations"])

    # retrieval: the query is an exact copy of a training window, so the best
    # match is that window with Pearson score 1
    train = [series[: synth["train_end"]]]
    query = [train[0][500:524]]
    periods = raft.retrieve_windows(train, query, horizon=12, m=3, periods=[1, 2])
    assert [p["period"] for p in periods] == [1, 2]
    best = periods[0]
    assert best["starts"][0] == 500, best["starts"]
    assert abs(best["scores"][0] - 1.0) < 1e-9
    assert abs(sum(best["weights"]) - 1.0) < 1e-12
    assert len(best["aggregate"]) == 1 and len(best["aggregate"][0]) == 12
    assert len(periods[1]["aggregate"][0]) == 6

    assert abs(raft.spearman([1, 2, 3, 4], [10, 20, 30, 40]) - 1.0) < 1e-12
    assert abs(raft.pearson([1, 2, 3], [3, 2, 1]) + 1.0) < 1e-12

    wave = [[math.sin(0.2 * t) + 0.01 * t for t in range(700)]]
    out = raft.run(wave, train_end=500, val_end=600, lookback=24, horizon=12, m=4, max_epochs=2, periods=[1, 2])
    assert math.isfinite(out["test_mse"]) and out["epochs"] >= 1
    base = raft.run(wave, train_end=500, val_end=600, lookback=24, horizon=12, variant="no_retrieval", max_epochs=2)
    print(f"test mse with retrieval {out['test_mse']:.4f}, without {base['test_mse']:.4f}")

    try:
        raft.run(wave, train_end=500, val_end=600, variant="bogus")
    except ValueError as e:
        assert "bogus" in str(e)
    else:
        raise AssertionError("unknown variant accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
