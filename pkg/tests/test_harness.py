import hashlib
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from oracles import binomial_tail_upper
from projprobe.attacks import AttackConfig, run_attack
from projprobe.data import N_ANSWERS
from projprobe.errors import ProjProbeError, RegistryLookupError, ValidationError
from projprobe.harness import (SIGMA_FLAG, DatasetRef, ExperimentSpec, ReportTable, RunRecord,
                               aggregate_runs, apply_axis, append_records, derive_seed,
                               evaluate_clean, mean_std, read_records, run_attack_experiment,
                               security_verdict, sweep)
from projprobe.losses import Objective, TCPConfig
from projprobe.models import HeadConfig
from projprobe.surrogates import ScenarioSpec, resolve_scenario
from projprobe.training import predict, train_target

FAST = AttackConfig.paper_defaults("pgd", iterations=2)


def _spec(target="target-c", scenario="white_box", sources=(), seeds=(0, 1), **kw):
    kw.setdefault("attack", FAST)
    sc = ScenarioSpec(scenario, target, sources=sources, k=kw.pop("k", None))
    return ExperimentSpec(name=kw.pop("name", "t"), target=target, scenario=sc, seeds=seeds, **kw)


def _record(adv, seed=0, **kw):
    base = dict(experiment="e", target="t", target_projector="compressed", scenario="white_box",
                sources=["t:vlp"], loss="vlp", beta=0.0, k=1, method="pgd", epsilon=8 / 255,
                step_size=2 / 255, iterations=20, axis=None, value=None, seed=seed,
                attack_seed=derive_seed(0, "attack", seed), n_items=100, n_output_tokens=4,
                clean_acc=90.0, adv_acc=adv, linf_mean=0.03, linf_max=8 / 255, l2_mean=1.0,
                target_projector_reads=3, dataset="abc", config_hash="cell", wall_time_s=0.1)
    base.update(kw)
    return RunRecord(**base)


# --- seeds ---------------------------------------------------------------------

def test_derive_seed_is_sha256_prefix():
    ref = int.from_bytes(hashlib.sha256(b"0/attack/3").digest()[:4], "little")
    assert derive_seed(0, "attack", 3) == ref
    assert derive_seed(0, "attack", 3) != derive_seed(0, "order", 3)
    assert derive_seed(0, "attack", 3) != derive_seed(1, "attack", 3)


# --- aggregation -----------------------------------------------------------------

def test_mean_std_hand_values():
    mu, var, sigma = mean_std([40, 42, 44])
    assert mu == 42.0 and var == pytest.approx(8 / 3, abs=1e-12)
    assert sigma == pytest.approx(1.632993161855452, abs=1e-12)


def test_aggregate_hand_values():
    table = aggregate_runs([_record(a, seed=i) for i, a in enumerate([40.0, 42.0, 44.0])])
    (row,) = table.rows
    assert row.adv_mu == 42.0 and row.n_seeds == 3
    assert row.adv_sigma == pytest.approx(math.sqrt(8 / 3), abs=1e-12)
    assert row.delta == 48.0 and row.adv_min == 40.0 and row.adv_max == 44.0
    assert row.flagged


def test_identical_records_have_zero_sigma():
    (row,) = aggregate_runs([_record(55.5, seed=i) for i in range(5)]).rows
    assert row.adv_sigma == 0.0 and not row.flagged


@pytest.mark.parametrize("spread,flag", [(0.5, False), (0.51, True)])
def test_sigma_flag_threshold(spread, flag):
    # two values +-s around the mean have population sigma s
    recs = [_record(50.0 - spread / 2, seed=0), _record(50.0 + spread / 2, seed=1)]
    (row,) = aggregate_runs(recs).rows
    assert row.adv_sigma == pytest.approx(spread / 2)
    assert row.flagged is flag and (row.adv_sigma > SIGMA_FLAG) is flag


def test_failed_runs_dropped_and_empty_cell_rejected():
    recs = [_record(40.0, seed=0), _record(float("nan"), seed=1, status="failed")]
    assert aggregate_runs(recs).rows[0].n_seeds == 1
    with pytest.raises(ValidationError):
        aggregate_runs([_record(float("nan"), status="failed")])
    assert len(aggregate_runs([])) == 0


def test_cells_grouped_in_first_seen_order():
    recs = [_record(1.0, config_hash="b"), _record(2.0, config_hash="a"),
            _record(3.0, config_hash="b", seed=1)]
    table = aggregate_runs(recs)
    assert [r.config_hash for r in table.rows] == ["b", "a"]
    assert table.rows[0].adv_mu == 2.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=8))
def test_aggregate_bounds_property(values):
    (row,) = aggregate_runs([_record(v, seed=i) for i, v in enumerate(values)]).rows
    assert row.adv_min - 1e-9 <= row.adv_mu <= row.adv_max + 1e-9
    assert row.adv_sigma == pytest.approx(math.sqrt(row.adv_var), abs=1e-12)
    assert row.adv_sigma <= (row.adv_max - row.adv_min) / 2 + 1e-9


# --- verdicts ----------------------------------------------------------------------

def test_verdict_from_published_compressed_numbers():
    v = security_verdict([44.94], [41.48])
    assert v.label == "vlp_weaker" and v.delta == pytest.approx(3.46, abs=1e-9)


def test_verdict_from_published_uncompressed_numbers():
    v = security_verdict([69.30], [71.21])
    assert v.label == "vlp_stronger" and v.delta == pytest.approx(-1.91, abs=1e-9)


def test_verdict_comparable_and_boundary():
    assert security_verdict([50.0], [50.0]).label == "comparable"
    assert security_verdict([51.0], [50.0]).label == "comparable"
    assert security_verdict([51.0], [50.0], tolerance=0.5).label == "vlp_weaker"


@settings(max_examples=100, deadline=None)
@given(a=st.lists(st.floats(0, 100), min_size=1, max_size=5),
       b=st.lists(st.floats(0, 100), min_size=1, max_size=5), tol=st.floats(0, 5))
def test_verdict_antisymmetric(a, b, tol):
    fwd, rev = security_verdict(a, b, tol), security_verdict(b, a, tol)
    flip = {"vlp_weaker": "vlp_stronger", "vlp_stronger": "vlp_weaker", "comparable": "comparable"}
    assert rev.label == flip[fwd.label]
    assert rev.delta == pytest.approx(-fwd.delta, abs=1e-9)


def test_verdict_over_records_and_mismatch():
    ve = [_record(50.0, seed=i, loss="ve") for i in range(3)]
    vlp = [_record(45.0, seed=i) for i in range(3)]
    assert security_verdict(ve, vlp).label == "vlp_weaker"
    for change in (dict(target="other"), dict(epsilon=4 / 255), dict(dataset="zzz"),
                   dict(method="cw"), dict(iterations=10)):
        with pytest.raises(ValidationError):
            security_verdict(ve, [_record(45.0, **change)])
    with pytest.raises(ValidationError):
        security_verdict(ve, [_record(float("nan"), status="failed")])


# --- clean accuracy ------------------------------------------------------------------

class LookupModel(nn.Module):
    """Answers by memorised image bytes: correct on every item by construction."""

    def __init__(self, dataset, n_answers=N_ANSWERS):
        super().__init__()
        self.head = nn.Module()
        self.head.cfg = HeadConfig(n_answers=n_answers)
        self.table = {dataset.images[i].tobytes(): int(a) for i, a in enumerate(dataset.answers)}

    def forward(self, images, questions):
        out = torch.zeros(len(images), self.head.cfg.n_answers)
        for i, img in enumerate(images.numpy()):
            out[i, self.table[img.tobytes()]] = 1.0
        return out


class CoinModel(LookupModel):
    def forward(self, images, questions):
        gen = torch.Generator().manual_seed(int(images.sum() * 1e4) % 2**31)
        return torch.rand(len(images), self.head.cfg.n_answers, generator=gen)


def test_clean_accuracy_of_perfect_model(mini_world):
    assert evaluate_clean(LookupModel(mini_world.eval), mini_world.eval) == 100.0


def test_clean_accuracy_of_random_guesser_within_binomial_bound():
    from projprobe.data import make_synthetic_vqa

    ds = make_synthetic_vqa(2, n=2000)
    acc = evaluate_clean(CoinModel(ds), ds)
    hits = round(acc * 20)
    p = 1 / N_ANSWERS
    assert binomial_tail_upper(2000, p, hits) > 1e-6
    assert 1 - binomial_tail_upper(2000, p, hits + 1) > 1e-6


def test_vocabulary_mismatch_rejected(mini_world):
    with pytest.raises(ValidationError):
        evaluate_clean(LookupModel(mini_world.eval, n_answers=N_ANSWERS - 1), mini_world.eval)


# --- experiment pipeline -----------------------------------------------------------------

def test_zero_budget_leaves_accuracy_unchanged(mini_world):
    spec = _spec(attack=AttackConfig.paper_defaults("pgd", epsilon=0.0, iterations=2))
    for rec in run_attack_experiment(spec, mini_world.registry, mini_world.eval):
        assert rec.adv_acc == rec.clean_acc and rec.linf_max == 0.0


def test_white_box_reads_target_gray_box_does_not(mini_world):
    reg = mini_world.registry
    wb = run_attack_experiment(_spec(seeds=(0,)), reg, mini_world.eval)
    tr = run_attack_experiment(_spec(scenario="transfer", sources=("sib-c0",), seeds=(0,)), reg,
                               mini_world.eval)
    sc = run_attack_experiment(_spec(scenario="scratch", sources=("sur-c0", "sur-c1"), seeds=(0,)),
                               reg, mini_world.eval)
    assert wb[0].target_projector_reads > 0
    assert tr[0].target_projector_reads == 0 and sc[0].target_projector_reads == 0
    assert sc[0].k == 2 and sc[0].sources == ["sur-c0:vlp", "sur-c1:vlp"]


def test_records_are_seed_deterministic(mini_world):
    spec = _spec(seeds=(3, 4))
    a = run_attack_experiment(spec, mini_world.registry, mini_world.eval)
    b = run_attack_experiment(spec, mini_world.registry, mini_world.eval)
    assert [r.stable() for r in a] == [r.stable() for r in b]
    assert a[0].attack_seed != a[1].attack_seed
    assert all(r.linf_max <= FAST.epsilon + 1e-7 for r in a)


def test_manual_pipeline_matches_harness(mini_world):
    """Attack item by item with no random start and score by hand."""
    reg = mini_world.registry
    data = mini_world.eval.subset(range(16))
    attack = AttackConfig.paper_defaults("pgd", iterations=3, random_init=False)
    spec = _spec(scenario="transfer", sources=("sib-c1",), seeds=(0,), attack=attack, loss="ve")
    (rec,) = run_attack_experiment(spec, reg, data)

    bundle = resolve_scenario(spec.scenario, reg)
    target = reg.model("target-c")
    x = torch.from_numpy(data.images)
    q = torch.from_numpy(data.questions)
    adv = torch.cat([run_attack(Objective("ve", bundle, x[i:i + 1], q[i:i + 1]), x[i:i + 1],
                                attack).x_adv for i in range(16)])
    pred = predict(target, adv, q).numpy()
    correct = int((pred == data.answers).sum())
    clean = int((predict(target, x, q).numpy() == data.answers).sum())
    assert rec.clean_acc == 100.0 * clean / 16
    assert rec.adv_acc == 100.0 * correct / 16
    assert rec.linf_max == pytest.approx(float((adv - x).abs().max()), abs=1e-7)


def test_failed_seed_writes_failed_record_and_reraises(mini_world):
    spec = _spec(scenario="transfer", sources=("missing-model",), seeds=(0, 1))
    seen = []
    with pytest.raises(RegistryLookupError) as info:
        run_attack_experiment(spec, mini_world.registry, mini_world.eval, on_record=seen.append)
    assert [r.status for r in info.value.records] == ["failed", "failed"]
    assert seen == info.value.records and "missing-model" in seen[0].error
    assert isinstance(info.value, ProjProbeError)


def test_generic_instruction_changes_cell(mini_world):
    a, b = _spec(), _spec(instruction="generic")
    assert a.cell_hash() != b.cell_hash()
    assert a.cell_hash() == _spec(seeds=(7, 8, 9)).cell_hash()
    rec = run_attack_experiment(_spec(instruction="generic", seeds=(0,)), mini_world.registry,
                                mini_world.eval)[0]
    assert rec.status == "ok"


# --- sweeps -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pooled_targets(mini_world):
    reg = mini_world.registry
    enc = reg.encoder("enc")
    for p in (1, 2, 4):
        if f"tpool-{p}" not in reg:
            model = train_target(enc, mini_world.train, "uncompressed", "A", steps=5,
                                 projector_cfg={"pool_factor": p})
            reg.add(f"tpool-{p}", model, "target", head_variant="A", encoder_id="enc")
    return reg


def test_pool_factor_sweep_token_counts(mini_world, pooled_targets):
    template = _spec(target="tpool-{value}", seeds=(0,))
    table, records = sweep(template, "pool_factor", [1, 2, 4.0], pooled_targets, mini_world.eval)
    assert [r.n_output_tokens for r in records] == [16, 4, 1]
    assert [r.value for r in table.rows] == [1, 2, 4]
    assert len({r.config_hash for r in table.rows}) == 3


def test_beta_sweep_one_row_per_value(mini_world):
    template = _spec(scenario="transfer", sources=("sib-c0", "sib-c1"), seeds=(0,), k=2)
    betas = [0.0, 0.1, 0.2, 0.3, 0.4, 1.0]
    table, records = sweep(template, "beta", betas, mini_world.registry, mini_world.eval)
    assert [r.value for r in table.rows] == betas
    assert all(r.loss == "tcp" and r.k == 2 for r in records)
    assert [r.beta for r in records] == betas


def test_k_axis_and_unknown_axis(mini_world):
    template = _spec(scenario="transfer", sources=("sib-c0", "sib-c1", "sib-c2"))
    for k in (1, 2, 3):
        spec = apply_axis(template, "k", k)
        assert spec.scenario.k == k and spec.tcp == TCPConfig(0.0, k)
    with pytest.raises(ValidationError):
        apply_axis(template, "lr", 1)
    with pytest.raises(ValidationError):
        apply_axis(template, "pool_factor", 2)


def test_task_flags_axis_formats_ids():
    template = _spec(scenario="scratch", sources=("sur-{value}",))
    spec = apply_axis(template, "task_flags", ["itc", "ic"])
    assert spec.scenario.sources == ("sur-itc+ic",)


def test_seeded_surrogate_selection(mini_world):
    spec = _spec(scenario="transfer", sources=("sib-c0", "sib-c1", "sib-c2"), k=1,
                 surrogate_selection="seeded", seeds=tuple(range(6)))
    recs = run_attack_experiment(spec, mini_world.registry, mini_world.eval)
    picked = [r.sources[0] for r in recs]
    assert len(set(picked)) > 1
    again = run_attack_experiment(spec, mini_world.registry, mini_world.eval)
    assert picked == [r.sources[0] for r in again]


# --- spec validation -----------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(seeds=()), dict(seeds=(1, 1)), dict(loss="mse"),
                                dict(instruction="none"), dict(surrogate_selection="best")])
def test_experiment_spec_validation(kw):
    with pytest.raises(ValidationError):
        _spec(**kw)


def test_scenario_target_must_match():
    with pytest.raises(ValidationError):
        ExperimentSpec("e", "a", ScenarioSpec("white_box", "b"))


# --- serialization ------------------------------------------------------------------------

def test_jsonl_round_trip_and_malformed_lines(tmp_path):
    recs = [_record(40.0 + i, seed=i, value=[1, 2]) for i in range(3)]
    path = tmp_path / "r.jsonl"
    append_records(path, recs[:2])
    append_records(path, recs[2:])
    with path.open("a") as fh:
        fh.write("{not json\n\n")
    back, bad = read_records(path)
    assert bad == 1
    assert [r.stable() for r in back] == [json.loads(json.dumps(r.stable())) for r in recs]
    assert all(json.loads(line)["schema_version"] == 1
               for line in path.read_text().splitlines()[:3])


def test_csv_round_trip(tmp_path):
    recs = [_record(1 / 3, seed=0), _record(2 / 7, seed=1),
            _record(12.5, config_hash="x", axis="task_flags", value=["itc", "ic"])]
    table = aggregate_runs(recs)
    table.to_csv(tmp_path / "t.csv")
    back = ReportTable.from_csv(tmp_path / "t.csv")
    assert back.rows == table.rows
    assert back.select(config_hash="x")[0].value == ["itc", "ic"]


def test_dataset_ref_caching():
    from projprobe.harness import load_dataset

    a = load_dataset(DatasetRef(seed=4, n=10))
    assert a is load_dataset(DatasetRef(seed=4, n=10))
    assert np.array_equal(a.images, load_dataset(DatasetRef(seed=4, n=10, split="eval")).images)
