import numpy as np
import pytest

from despur.benchworld import BenchGenerator, SplitPlan, WorldParams, sample_world
from despur.interchange import FeatureSet
from despur.synthesis import (
    ClientContractError,
    GenerationRequest,
    HttpGenerator,
    JournalingGenerator,
    ReplayGenerator,
    ReplayMissError,
    build_generation_prompts,
    build_requests,
    generate_debug_train,
    random_debug_train,
)
from despur.seeds import derive_seed


class StubGenerator:
    """Deterministic rows keyed by the request seed."""

    identity = "stub-gen"

    def __init__(self, dim=6):
        self.dim = dim

    def generate(self, request):
        rng = np.random.default_rng(request.rng_seed)
        return rng.normal(size=(request.n_samples, self.dim))


class MisbehavingGenerator:
    identity = "bad-gen"

    def __init__(self, mode):
        self.mode = mode

    def generate(self, request):
        if self.mode == "count":
            return np.zeros((request.n_samples + 1, 4))
        if self.mode == "dim_drift":
            d = 4 if request.background == "first" else 5
            return np.zeros((request.n_samples, d))
        if self.mode == "nan":
            rows = np.zeros((request.n_samples, 4))
            rows[0, 0] = np.nan
            return rows
        raise AssertionError(self.mode)


def test_generation_prompt_rendering():
    prompts = build_generation_prompts("tench", ["in a hand", "underwater"])
    assert prompts == ["A photo of tench in a hand", "A photo of tench underwater"]


def test_request_validation():
    with pytest.raises(ValueError):
        GenerationRequest(class_index=0, class_name="", prompt="x")
    with pytest.raises(ValueError):
        GenerationRequest(class_index=0, class_name="c", prompt="x", background="")
    with pytest.raises(ValueError):
        GenerationRequest(class_index=0, class_name="c", prompt="x", n_samples=0)


def test_build_requests_seeds_depend_only_on_mode():
    reqs_a = build_requests(["cat", "dog"], {0: ["desert"], 1: ["cave"]}, rng_seed=5)
    reqs_b = build_requests(["cat", "dog"], {1: ["cave"]}, rng_seed=5)
    by_mode_a = {(r.class_index, r.background): r.rng_seed for r in reqs_a}
    by_mode_b = {(r.class_index, r.background): r.rng_seed for r in reqs_b}
    assert by_mode_a[(1, "cave")] == by_mode_b[(1, "cave")]
    assert by_mode_a[(1, "cave")] == derive_seed(5, "gen", 1, "cave")
    # Default sample count is five per mode.
    assert all(r.n_samples == 5 for r in reqs_a)


def test_generate_debug_train_cardinality_and_ids():
    requests = build_requests(
        ["cat", "dog"], {0: ["desert", "cave"], 1: ["sky"]}, rng_seed=1, n_samples=5
    )
    fs = generate_debug_train(requests, StubGenerator(), ["cat", "dog"])
    assert len(fs) == 3 * 5
    assert fs.source_tag == "debug_train"
    assert fs.dim == 6
    assert int((fs.labels == 0).sum()) == 10
    assert int((fs.labels == 1).sum()) == 5
    assert "gen|cat|desert|000" in fs.ids
    assert "gen|dog|sky|004" in fs.ids


def test_generate_debug_train_deterministic():
    requests = build_requests(["cat"], {0: ["desert"]}, rng_seed=2)
    a = generate_debug_train(requests, StubGenerator(), ["cat"])
    b = generate_debug_train(requests, StubGenerator(), ["cat"])
    assert a == b


def test_generate_debug_train_duplicate_mode_rejected():
    req = build_requests(["cat"], {0: ["desert"]}, rng_seed=3)
    with pytest.raises(ValueError):
        generate_debug_train(req + req, StubGenerator(), ["cat"])


def test_generate_debug_train_empty_rejected():
    with pytest.raises(ValueError):
        generate_debug_train([], StubGenerator(), ["cat"])


def test_client_contract_wrong_count():
    requests = build_requests(["cat"], {0: ["x"]}, rng_seed=0)
    with pytest.raises(ClientContractError):
        generate_debug_train(requests, MisbehavingGenerator("count"), ["cat"])


def test_client_contract_dim_drift():
    requests = build_requests(["cat"], {0: ["first", "second"]}, rng_seed=0)
    with pytest.raises(ClientContractError):
        generate_debug_train(requests, MisbehavingGenerator("dim_drift"), ["cat"])


def test_client_contract_expected_dim():
    requests = build_requests(["cat"], {0: ["x"]}, rng_seed=0)
    with pytest.raises(ClientContractError):
        generate_debug_train(requests, StubGenerator(dim=6), ["cat"], expected_dim=7)


def test_client_contract_non_finite():
    requests = build_requests(["cat"], {0: ["x"]}, rng_seed=0)
    with pytest.raises(ClientContractError):
        generate_debug_train(requests, MisbehavingGenerator("nan"), ["cat"])


def test_random_debug_train_shape_and_prompts():
    fs = random_debug_train(["cat", "dog", "eel", "fox"], 5, StubGenerator(), rng_seed=9)
    assert len(fs) == 20
    for name in ("cat", "dog", "eel", "fox"):
        assert f"gen|{name}||000" in fs.ids
    assert fs.source_tag == "debug_train"


def test_bench_generator_round_trip_with_requests():
    world = sample_world(WorldParams(), rng_seed=4)
    gen = BenchGenerator(world)
    top = {0: [world.background_names[5]], 3: [world.background_names[7]]}
    requests = build_requests(world.class_names, top, rng_seed=11)
    a = generate_debug_train(requests, gen, world.class_names, expected_dim=world.params.dim)
    b = generate_debug_train(requests, gen, world.class_names, expected_dim=world.params.dim)
    assert a == b
    assert a.dim == world.params.dim


def test_journal_and_replay_bitwise(tmp_path):
    class_names = ["cat", "dog"]
    requests = build_requests(class_names, {0: ["desert"], 1: ["cave", "sky"]}, rng_seed=6)
    recorder = JournalingGenerator(StubGenerator(), tmp_path / "journal", class_names)
    recorded = generate_debug_train(requests, recorder, class_names)

    replayer = ReplayGenerator(tmp_path / "journal")
    replayed = generate_debug_train(requests, replayer, class_names)
    assert replayed == recorded
    assert replayer.identity == "replay:stub-gen"

    # Order of requests must not matter: match is by (prompt, n, seed).
    replayed_rev = generate_debug_train(list(reversed(requests)), replayer, class_names)
    assert sorted(replayed_rev.ids) == sorted(recorded.ids)


def test_replay_miss_raises(tmp_path):
    class_names = ["cat"]
    requests = build_requests(class_names, {0: ["desert"]}, rng_seed=7)
    recorder = JournalingGenerator(StubGenerator(), tmp_path / "j", class_names)
    generate_debug_train(requests, recorder, class_names)
    replayer = ReplayGenerator(tmp_path / "j")
    other = build_requests(class_names, {0: ["volcano"]}, rng_seed=7)
    with pytest.raises(ReplayMissError):
        generate_debug_train(other, replayer, class_names)


def test_journal_layout_on_disk(tmp_path):
    class_names = ["cat"]
    requests = build_requests(class_names, {0: ["desert", "cave"]}, rng_seed=8)
    recorder = JournalingGenerator(StubGenerator(), tmp_path / "j", class_names)
    generate_debug_train(requests, recorder, class_names)
    import json

    payload = json.loads((tmp_path / "j" / "journal.json").read_text())
    assert payload["client"] == "stub-gen"
    assert payload["dim"] == 6
    assert len(payload["calls"]) == 2
    for call in payload["calls"]:
        assert (tmp_path / "j" / call["file"]).exists()
        assert set(call) >= {"prompt", "n_samples", "rng_seed", "background", "file"}
