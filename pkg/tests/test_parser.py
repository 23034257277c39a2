import numpy as np
import pytest
import torch

from langsteer.agent import GreedyAgent, SemanticPipeline, SemanticSettings
from langsteer.instructions import Instruction, ParseError, Template, TemplateGrammar, parse
from langsteer.policy import Policy, PolicyConfig, decode
from langsteer.sim.mock_embedding import MockEmbedding
from langsteer.sim.tasks import TASKS, sample_scene


def _all_instructions():
    return [(name, v, s) for name, t in TASKS.items() for v in t.variants for s in t.instruction_space(v)]


def test_exhaustive_instruction_set_parses():
    grammar = TemplateGrammar.default()
    items = _all_instructions()
    assert len(items) > 100
    for task, variant, text in items:
        found = grammar.matches(text)
        # exactly one template claims each generated instruction
        assert len(found) == 1, (task, text, found)
        ins = found[0]
        assert ins.pick and ins.place
        assert ins.template_id
        assert parse(text) == ins


@pytest.mark.parametrize("text, pick, place", [
    ("Put the red blocks in a green bowl", "red blocks", "green bowl"),
    ("Pack the banana in the brown box", "banana", "brown box"),
    ("pick the red block and place into the brown box", "red block", "brown box"),
    ("put the cyan block on the lightest brown block", "cyan block", "lightest brown block"),
    ("put the cyan block on the red and blue blocks", "cyan block", "red and blue blocks"),
    ("  Put the  red blocks in a green bowl. ", "red blocks", "green bowl"),
])
def test_known_parses(text, pick, place):
    ins = parse(text)
    assert (ins.pick, ins.place) == (pick, place)
    assert ins.raw == text


def test_garbage_is_a_parse_error_with_nearest_template():
    with pytest.raises(ParseError) as err:
        parse("sing a song")
    assert err.value.nearest in {t.pattern for t in TemplateGrammar.default().templates}
    assert 0.0 <= err.value.score <= 1.0


def test_parse_is_deterministic():
    assert parse("put the red blocks in a green bowl") == parse("put the red blocks in a green bowl")


def test_grammar_from_json_and_errors():
    g = TemplateGrammar.from_json('{"version": 2, "templates": [{"id": "x", "pattern": "move {pick} to {place}"}]}')
    assert g.version == 2
    assert g.parse("move the cup to the shelf") == Instruction("move the cup to the shelf", "cup", "shelf", "x")
    with pytest.raises(ValueError):
        TemplateGrammar([])
    assert Template("t", "put {pick} on {place}").render("a", "b") == "put a on b"


# ---------------------------------------------------------------------------
# factorised decoding


@pytest.fixture(scope="module")
def agent():
    torch.manual_seed(0)
    cfg = PolicyConfig(n_rot=36, n_theta=12, max_freq=5, kernel_size=11, crop_size=15, width=4, n_blocks=2,
                       embed_dim=64, smooth_sigma=2.0)
    pipe = SemanticPipeline(MockEmbedding(), SemanticSettings(n_views=1))
    return GreedyAgent(Policy(cfg).eval(), pipe, keep_volumes=True)


@pytest.fixture(scope="module")
def encoded(agent):
    return [agent.pipeline.encode(sample_scene("put_blocks", 3))]


def test_joint_action_equals_sequential_decoding(agent, encoded):
    ins = parse("put the red blocks in a green bowl")
    d = agent.act_encoded(encoded, [0], ins)
    pick = decode(d.pick_volumes[0])
    assert (d.pick.u, d.pick.v, d.pick.bin) == (pick.u, pick.v, pick.bin)
    _, place, _, _ = agent.place_given_pick(encoded, ins, 0, pick)
    assert place == d.place


def test_place_phrase_does_not_reach_the_pick(agent, encoded):
    a = agent.act_encoded(encoded, [0], parse("put the red blocks in a green bowl"))
    b = agent.act_encoded(encoded, [0], parse("put the red blocks in a blue bowl"))
    assert a.pick == b.pick
    assert np.array_equal(a.pick_volumes[0], b.pick_volumes[0])


def test_pick_phrase_does_not_reach_the_place_given_the_crop(agent, encoded):
    a = agent.act_encoded(encoded, [0], parse("put the red blocks in a green bowl"))
    pick = a.pick
    for other in ("put the blue blocks in a green bowl", "put the yellow blocks in a green bowl"):
        _, place, _, vols = agent.place_given_pick(encoded, parse(other), 0, pick)
        assert place == a.place
        assert np.array_equal(vols[0], a.place_volumes[0])
