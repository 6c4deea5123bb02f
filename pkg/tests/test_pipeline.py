import json

import numpy as np
import pytest

from spatialnli import cli
from spatialnli.config import Config
from spatialnli.data import sample_dir
from spatialnli.injection import FixedResolver
from spatialnli.pipeline import (
    STAGES, IncompatibleFlags, Resources, StageError, evaluate_corpus, load_dataset, load_resources, mapper_config,
    run_ablation, run_pipeline, train_all,
)

TINY = {
    "comprehension": {"hidden": 8, "mlp_hidden": 8, "attn_dim": 8, "epochs": 1},
    "translator": {"embed_dim": 16, "enc_hidden": 16, "dec_hidden": 16, "attn_dim": 16, "epochs": 2,
                   "batch_size": 16, "beam_width": 2, "max_len": 40},
    "pipeline": {"augment": ["pp"], "max_per_source": 1},
}


def tiny_config():
    return Config.from_dict(TINY)


@pytest.fixture(scope="module")
def ds():
    return load_dataset(sample_dir())


@pytest.fixture(scope="module")
def trained(ds, sample_vectors, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    train_all(tiny_config(), [ds], sample_vectors, out_dir=out)
    return out


@pytest.fixture(scope="module")
def res(trained, ds, sample_vectors):
    return load_resources(trained / ds.name, ds, sample_vectors)


def test_oracle_mode_is_exact(ds, res):
    report = evaluate_corpus(ds.examples, res, oracle=True)
    assert report["accuracy"] == 1.0 and report["exact_accuracy"] == 1.0


def test_failures_are_attributed_to_one_stage(ds, res):
    report = evaluate_corpus(ds.test, res)
    failed = [r for r in report["records"] if not r["correct"]]
    assert all(r["stage"] in STAGES for r in failed)
    assert sum(report["breakdown"].values()) == len(failed)
    assert all(r["stage"] is None for r in report["records"] if r["correct"])


def test_evaluation_is_idempotent_order_independent_and_parallel_safe(ds, res):
    by_q = lambda rep: {r["question"]: (r["correct"], r["prediction"]) for r in rep["records"]}  # noqa: E731
    a = evaluate_corpus(ds.test, res)
    assert by_q(a) == by_q(evaluate_corpus(ds.test, res))
    assert by_q(a) == by_q(evaluate_corpus(ds.test[::-1], res))
    assert by_q(a) == by_q(evaluate_corpus(ds.test, res, workers=3))


def test_stage_errors_carry_their_stage(ds, res):
    def broken(qp):
        raise RuntimeError("boom")
    with pytest.raises(StageError) as err:
        run_pipeline("What is the population of San Antonio ?", res, translate=broken)
    assert err.value.stage == "translation"
    with pytest.raises(StageError) as err:
        run_pipeline("What is the population of San Antonio ?", res, translate=lambda qp: "answer(A,<k7>(A))")
    assert err.value.stage == "recovery"
    assert err.value.trace.l_sym == "answer(A,<k7>(A))"


def test_run_pipeline_with_a_gold_translation(ds, sample_vectors):
    res = Resources(ds.db, None, mapper_config(Config(), ds.lexicon), sample_vectors, resolver=FixedResolver("river"))
    l, trace = run_pipeline("How many states does the Mississippi run through ?", res,
                            translate=lambda qp: "answer(A,<k0>(B,(<k1>(B),const(C,<k2>(<v0>)),<k3>(C,B)),A))")
    assert l == "answer(A,count(B,(state(B),const(C,riverid(Mississippi)),traverse(C,B)),A))"
    assert trace.as_dict()["q_prime"].startswith("<k0> How many <eok>")


def test_flag_validation(ds):
    with pytest.raises(IncompatibleFlags):
        run_ablation(["no-inject", "no-typefeed"], ds, tiny_config())
    with pytest.raises(ValueError):
        run_ablation(["no-such-thing"], ds, tiny_config())


def test_empty_ablation_equals_plain_evaluation(ds, sample_vectors, res):
    report = run_ablation([], ds, tiny_config(), sample_vectors)
    plain = evaluate_corpus(ds.test, res)
    assert report["flags"] == []
    assert [r["prediction"] for r in report["records"]] == [r["prediction"] for r in plain["records"]]


def test_training_is_deterministic(ds, sample_vectors, trained, tmp_path):
    train_all(tiny_config(), [ds], sample_vectors, out_dir=tmp_path)
    for name in ("translator.npz", "comprehension.npz"):
        a = np.load(trained / ds.name / name)
        b = np.load(tmp_path / ds.name / name)
        assert sorted(a.files) == sorted(b.files)
        assert all(np.array_equal(a[k], b[k]) for k in a.files)


def test_joint_training_shares_one_translator(ds, sample_vectors):
    cfg = tiny_config()
    cfg.translator.epochs = 1
    other = load_dataset(sample_dir(), name="copy")
    trained = train_all(cfg, [ds, other], sample_vectors, joint=True)
    assert trained.translators[ds.name] is trained.translators["copy"]


def test_cli_augment_infer_and_evaluate(trained, ds, tmp_path, capsys):
    out = tmp_path / "aug.tsv"
    assert cli.main(["augment", "--types", "pp", "--out", str(out)]) == 0
    assert out.read_text().count("\n") > 0
    capsys.readouterr()

    ckpt = str(trained / ds.name)
    cli.main(["infer", "--checkpoints", ckpt, "--trace", "What is the population of San Antonio ?"])
    rec = json.loads(capsys.readouterr().out.splitlines()[0])
    assert rec["q_prime"] == "what is the <k0> population <eok> of <k1> cityid <eok> <v0> San Antonio <eov> ?"

    assert cli.main(["evaluate", "--checkpoints", ckpt, "--oracle", "--split", "all"]) == 0
    summary = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert summary["accuracy"] == 1.0 and summary["n"] == len(ds.examples)


def test_cli_train_with_overrides(tmp_path, capsys):
    args = ["train", "--out", str(tmp_path)]
    for section, values in TINY.items():
        for k, v in values.items():
            args += ["--set", f"{section}.{k}={json.dumps(v)}"]
    args += ["--set", "translator.epochs=1", "--set", "comprehension.epochs=1"]
    assert cli.main(args) == 0
    assert "checkpoints written to" in capsys.readouterr().out
    meta = json.loads((tmp_path / "geo_sample" / "pipeline.json").read_text())
    assert meta["config"]["translator"]["enc_hidden"] == 16 and meta["config"]["pipeline"]["augment"] == ["pp"]
