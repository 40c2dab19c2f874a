import numpy as np
import pytest

from tfcgc.cgc import TFCGCMap
from tfcgc.cli import (
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_USAGE,
    RunConfig,
    UsageError,
    _metric,
    causal_flow_table,
    dump_config,
    load_config,
    main,
    parse_direction,
    read_map,
    read_trials,
    write_map,
    write_trials,
)
from tfcgc.simkit import ScenarioConfig, gen_sim2
from tfcgc.tvarx import TrialSet

FAST = ["--orders", "3", "--scale", "2"]


def _dir(tmp_path, name):
    d = tmp_path / name
    d.mkdir()
    return d


def _white_noise_csv(tmp_path, channels=("a", "b", "c"), W=4, N=300, seed=0):
    rng = np.random.default_rng(seed)
    path = tmp_path / "noise.csv"
    write_trials(path, TrialSet(channels, rng.standard_normal((W, N, len(channels))), 200.0))
    return path


def _sim2_csv(tmp_path, **kw):
    cfg = ScenarioConfig.default("sim2", **kw)
    data, _ = gen_sim2(cfg)
    path = tmp_path / "sim2.csv"
    write_trials(path, data)
    return path


def test_simulate_is_byte_identical(tmp_path):
    a, b = _dir(tmp_path, "a"), _dir(tmp_path, "b")
    for out in (a, b):
        assert main(["simulate", "--scenario", "sim2", "--seed", "7", "--out", str(out)]) == 0
    for name in ("data.csv", "truth.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    # the echoed configs differ only in the output directory
    ca, cb = (load_config((d / "config.txt").read_text()) for d in (a, b))
    assert ca.pop("out") != cb.pop("out") and ca == cb
    assert (a / "truth.csv").read_text().splitlines()[0].startswith("t,x<-x@1,x<-x@2,x<-y@1")


def test_simulate_sim1_has_2000_rows_per_trial(tmp_path):
    out = _dir(tmp_path, "o")
    assert main(["simulate", "--scenario", "sim1", "--n-trials", "2", "--out", str(out)]) == 0
    data = read_trials(out / "data.csv", 200.0)
    assert data.data.shape == (2, 2000, 3)
    assert "fs = 200.0" in (out / "config.txt").read_text()


def test_simulate_missing_output_dir(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "nope")]) != 0


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["simulate"]) == EXIT_USAGE
    assert main(["simulate", "--out", str(tmp_path), "--scenario", "sim9"]) == EXIT_USAGE
    assert main(["simulate", "--out", str(tmp_path), "--threads", "0"]) == EXIT_USAGE
    assert main(["cgc", "--out", str(tmp_path), "--input", "x.csv"]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_cgc_white_noise_has_no_significant_cells(tmp_path):
    path = _white_noise_csv(tmp_path)
    out = _dir(tmp_path, "o")
    code = main(["cgc", "--input", str(path), "--direction", "b->a|c", "--out", str(out),
                 "--n-perm", "19", "--alpha", "0.05", *FAST])
    assert code == 0
    tf_map, sig = read_map(out / "map.csv")
    assert tf_map.gc.shape == (298, 101)
    assert not sig.any()
    summary = (out / "summary.txt").read_text()
    assert "threshold = " in summary and "flagged_cells = 0" in summary


def test_cgc_sim2_significance_in_first_half(tmp_path):
    path = _sim2_csv(tmp_path, n_samples=600, n_trials=10, seed=1)
    out = _dir(tmp_path, "o")
    code = main(["cgc", "--input", str(path), "--direction", "x->y|z", "--out", str(out),
                 "--n-perm", "19", "--alpha", "0.05", "--estimator", "ols"])
    assert code == 0
    tf_map, sig = read_map(out / "map.csv")
    first = sig[tf_map.times <= 300].sum()
    second = sig[tf_map.times > 300].sum()
    assert first > 0 and first > 10 * second


def test_cgc_rejects_two_channels(tmp_path):
    path = _white_noise_csv(tmp_path, channels=("a", "b"))
    out = _dir(tmp_path, "o")
    assert main(["cgc", "--input", str(path), "--direction", "b->a|c",
                 "--out", str(out)]) == EXIT_USAGE


def test_cgc_unknown_channel_and_bad_direction(tmp_path):
    path = _white_noise_csv(tmp_path)
    out = _dir(tmp_path, "o")
    base = ["cgc", "--input", str(path), "--out", str(out)]
    assert main(base + ["--direction", "b->q|c"]) == EXIT_USAGE
    assert main(base + ["--direction", "b-a|c"]) == EXIT_USAGE
    assert main(base + ["--direction", "b->b|c"]) == EXIT_USAGE


@pytest.mark.parametrize("body", [
    "trial,t,a,b,c\n1,1,0.1,0.2\n",
    "trial,t,a,b,c\n1,1,0.1,x,0.3\n",
    "time,a,b,c\n1,0.1,0.2,0.3\n",
    "trial,t,a,b,c\n1,1,0.1,0.2,0.3\n1,3,0.1,0.2,0.3\n",
    "trial,t,a,b,c\n1,1,0.1,0.2,nan\n",
    "",
])
def test_cgc_malformed_csv(tmp_path, body):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    out = _dir(tmp_path, "o")
    assert main(["cgc", "--input", str(path), "--direction", "a->b|c",
                 "--out", str(out)]) == EXIT_IO


def test_cgc_missing_input_file(tmp_path):
    assert main(["cgc", "--input", str(tmp_path / "none.csv"), "--direction", "a->b|c",
                 "--out", str(tmp_path)]) == EXIT_IO


def test_cgc_zero_signal_is_numeric_failure(tmp_path):
    path = tmp_path / "zero.csv"
    write_trials(path, TrialSet(("a", "b", "c"), np.zeros((2, 100, 3)), 200.0))
    out = _dir(tmp_path, "o")
    assert main(["cgc", "--input", str(path), "--direction", "a->b|c", "--out", str(out),
                 "--no-significance", *FAST]) == EXIT_NUMERIC


def test_config_echo_reproduces_run(tmp_path):
    path = _white_noise_csv(tmp_path, seed=4)
    a, b = _dir(tmp_path, "a"), _dir(tmp_path, "b")
    assert main(["cgc", "--input", str(path), "--direction", "a->b|c", "--out", str(a),
                 "--n-perm", "19", "--alpha", "0.05", "--seed", "3", *FAST]) == 0
    assert main(["cgc", "--config", str(a / "config.txt"), "--out", str(b)]) == 0
    for name in ("map.csv", "summary.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_threads_do_not_change_outputs(tmp_path):
    path = _white_noise_csv(tmp_path, seed=5)
    outs = []
    for threads in ("1", "3"):
        out = _dir(tmp_path, f"t{threads}")
        assert main(["cgc", "--input", str(path), "--direction", "c->a|b", "--out", str(out),
                     "--n-perm", "19", "--alpha", "0.05", "--threads", threads, *FAST]) == 0
        outs.append(out)
    for name in ("map.csv", "summary.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_bench_rows_and_formatting(tmp_path, capsys):
    out = _dir(tmp_path, "o")
    code = main(["bench", "--scenario", "sim2", "--n-samples", "300", "--n-trials", "3",
                 "--no-significance", "--out", str(out), *FAST])
    assert code == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "direction,estimator,MAE,RMSE,PSNR"
    assert len(lines) == 1 + 24
    assert "x->y|z,urols," in "\n".join(lines)
    assert _metric(float("inf")) == "inf"
    assert _metric(float("-inf")) == "-inf"
    assert _metric(0.25) == "0.25"


def test_bench_unknown_estimator(tmp_path):
    assert main(["bench", "--estimators", "ols,foo", "--out", str(tmp_path)]) == EXIT_USAGE


def _map(gc, times=(1, 2, 3, 4), freqs=(0.0, 10.0, 20.0)):
    gc = np.asarray(gc, float)
    return TFCGCMap(np.array(times), np.array(freqs), gc, np.zeros(gc.shape, bool))


def test_flow_symmetric_maps_give_zero():
    rng = np.random.default_rng(1)
    gc = rng.random((4, 3))
    sig = np.ones((4, 3), bool)
    maps = {(a, b): (_map(gc), sig) for a in "pqr" for b in "pqr" if a != b}
    nodes, rows = causal_flow_table(maps, (5.0, 25.0), 2)
    assert nodes == ["p", "q", "r"]
    assert len(rows) == 6
    assert all(cf == 0.0 for *_, cf in rows)


def test_flow_hand_computed_signs():
    sig = np.ones((4, 3), bool)
    strong = _map(np.tile([0.0, 1.0, 3.0], (4, 1)))  # band mean over 10 and 20 Hz = 2
    zero = _map(np.zeros((4, 3)))
    maps = {("p", "q"): (strong, sig), ("q", "p"): (zero, sig)}
    _, rows = causal_flow_table(maps, (10.0, 20.0), 4)
    assert rows == [("p", 1, 4, 2.0), ("q", 1, 4, -2.0)]
    # non-significant cells do not count
    maps[("p", "q")] = (strong, np.zeros((4, 3), bool))
    _, rows = causal_flow_table(maps, (10.0, 20.0), 4)
    assert [cf for *_, cf in rows] == [0.0, 0.0]


def test_flow_sums_to_zero_per_window():
    rng = np.random.default_rng(2)
    maps = {(a, b): (_map(rng.random((4, 3))), rng.random((4, 3)) > 0.3)
            for a in "pqrs" for b in "pqrs" if a != b}
    _, rows = causal_flow_table(maps, (0.0, 20.0), 3)
    for start in (1, 4):
        total = sum(cf for _, lo, _, cf in rows if lo == start)
        assert abs(total) < 1e-12


def test_flow_missing_pairs(tmp_path, capsys):
    sig = np.ones((4, 3), bool)
    with pytest.raises(UsageError, match="q->p"):
        causal_flow_table({("p", "q"): (_map(np.zeros((4, 3))), sig)}, (0.0, 20.0), 2)
    path = tmp_path / "m.csv"
    write_map(path, _map(np.zeros((4, 3))))
    out = _dir(tmp_path, "o")
    assert main(["flow", "--map", f"p->q={path}", "--out", str(out)]) == EXIT_USAGE
    assert "missing pairs: q->p" in capsys.readouterr().err


def test_flow_command(tmp_path):
    paths = {}
    for pair, value in {("p", "q"): 0.5, ("q", "p"): 0.1}.items():
        m = _map(np.full((4, 3), value)).with_threshold(0.0)
        paths[pair] = tmp_path / f"{pair[0]}{pair[1]}.csv"
        write_map(paths[pair], m)
    out = _dir(tmp_path, "o")
    args = ["flow", "--out", str(out), "--band", "0,20", "--window", "2"]
    for (a, b), p in paths.items():
        args += ["--map", f"{a}->{b}={p}"]
    assert main(args) == 0
    lines = (out / "flow.csv").read_text().splitlines()
    assert lines[0] == "node,t_start,t_end,flow"
    rows = [line.split(",") for line in lines[1:]]
    assert [r[:3] for r in rows] == [["p", "1", "2"], ["q", "1", "2"],
                                     ["p", "3", "4"], ["q", "3", "4"]]
    assert np.allclose([float(r[3]) for r in rows], [0.4, -0.4, 0.4, -0.4], atol=1e-15)


def test_trial_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    data = TrialSet(("a", "b", "c"), rng.standard_normal((3, 20, 3)) * 1e3, 250.0)
    p1, p2 = tmp_path / "1.csv", tmp_path / "2.csv"
    write_trials(p1, data)
    back = read_trials(p1, 250.0)
    assert np.array_equal(back.data, data.data)
    write_trials(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_trial_csv_rows_may_be_shuffled(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("trial,t,a,b,c\n2,2,8,8,8\n1,2,2,2,2\n2,1,7,7,7\n1,1,1,1,1\n")
    data = read_trials(path, 200.0)
    assert data.data[:, :, 0].tolist() == [[1.0, 2.0], [7.0, 8.0]]


def test_map_csv_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    flagged = rng.random((5, 7)) > 0.8
    m = TFCGCMap(np.arange(3, 8), np.linspace(0, 100, 7), rng.random((5, 7)), flagged, 0.4)
    p1, p2 = tmp_path / "1.csv", tmp_path / "2.csv"
    write_map(p1, m)
    back, sig = read_map(p1)
    assert np.array_equal(back.gc, m.gc) and np.array_equal(back.flagged, flagged)
    assert np.array_equal(sig, m.significant)
    write_map(p2, back.with_threshold(0.4))
    assert p1.read_bytes() == p2.read_bytes()


def test_config_text_round_trip():
    cfg = RunConfig(subcommand="bench", out="/tmp/x", mu=0.5, max_terms=None,
                    orders=(3, 5), band=(7.5, 12.0), significance=False, sigma2=0.1)
    text = dump_config(cfg)
    assert "mu = 0.5\n" in text and "max_terms = none\n" in text
    assert RunConfig(**load_config(text)) == cfg
    assert dump_config(RunConfig(**load_config(text))) == text


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("no_such_key = 1\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    bad.write_text("significance = maybe\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["simulate", "--config", str(tmp_path / "none.txt"),
                 "--out", str(tmp_path)]) == EXIT_IO


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\nscenario = sim1\nn_samples = 50\nn_trials = 1\nseed = 1\n")
    out = _dir(tmp_path, "o")
    assert main(["simulate", "--config", str(cfg), "--seed", "2", "--out", str(out)]) == 0
    echoed = load_config((out / "config.txt").read_text())
    assert echoed["seed"] == 2 and echoed["scenario"] == "sim1" and echoed["n_samples"] == 50


def test_parse_direction():
    assert parse_direction(" Y -> X | Z ") == ("Y", "X", "Z")
    with pytest.raises(UsageError):
        parse_direction("Y->X")


def test_forgetting_resolves_per_scenario():
    assert RunConfig().pipeline("sim1").forgetting == 0.94
    assert RunConfig().pipeline("sim2").forgetting == 0.90
    assert RunConfig(forgetting=0.8).pipeline("sim2").forgetting == 0.8
