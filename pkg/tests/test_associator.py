import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import literal_attention, scalar_sine

from tbdq.associator import (
    BII,
    CPA,
    Associator,
    AssociatorConfig,
    DecoderLayer,
    FingerprintMismatch,
    ObjectQuery,
    build_noisy_queries,
    filter_detection_queries,
    load_checkpoint,
    save_checkpoint,
    update_history,
)
from tbdq.associator.inputs import prepare_frame
from tbdq.associator.model import band_permutation, pooled_offsets, refine_boxes
from tbdq.core import BoundingBox, inverse_sigmoid
from tbdq.detsim import Detection, FrameObservation

D = torch.float64


def det_query(score, content=None, d=8):
    content = np.full(d, score) if content is None else content
    return ObjectQuery(content, BoundingBox(0.5, 0.5, 0.1, 0.1), score)


def literal_bii(d):
    bii = BII(d, learned_projections=False, layer_norm=False).double()
    bii.ffn.zero_()
    return bii


def rand(*shape, gen=None):
    return torch.randn(*shape, dtype=D, generator=gen)


# -- query filtering and hard negatives -------------------------------------------


def test_filter_threshold_example():
    qs = [det_query(s) for s in (0.9, 0.25, 0.31)]
    kept, rejected = filter_detection_queries(qs, 0.3)
    assert [q.score for q in kept] == [0.9, 0.31]
    assert [q.score for q in rejected] == [0.25]


def test_filter_empty_and_inclusive_boundary():
    assert filter_detection_queries([], 0.3) == ([], [])
    kept, rejected = filter_detection_queries([det_query(0.3) for _ in range(4)], 0.3)
    assert len(kept) == 4 and rejected == []


def test_filter_rejects_track_queries():
    q = det_query(0.5)
    q.kind = "track"
    with pytest.raises(ValueError):
        filter_detection_queries([q], 0.3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=12), st.floats(0.01, 0.99))
def test_filter_partitions_input(scores, tau):
    qs = [det_query(s) for s in scores]
    kept, rejected = filter_detection_queries(qs, tau)
    assert len(kept) + len(rejected) == len(qs)
    assert all(q.score >= tau for q in kept) and all(q.score < tau for q in rejected)
    assert [id(q) for q in kept] == [id(q) for q in qs if q.score >= tau]


def test_noisy_queries_top_m_descending():
    rej = [det_query(s) for s in (0.25, 0.29, 0.1)]
    out = build_noisy_queries(rej, 2, 8)
    assert np.allclose(out[0], 0.29) and np.allclose(out[1], 0.25)


def test_noisy_queries_padding_and_empty():
    assert np.array_equal(build_noisy_queries([], 3, 8), np.zeros((3, 8)))
    assert build_noisy_queries([det_query(0.2)], 0, 8).shape == (0, 8)


def _obs(scores, d=64):
    rng = np.random.default_rng(0)
    dets = [Detection(BoundingBox(0.1 + 0.1 * i, 0.5, 0.05, 0.05), s, rng.standard_normal(d)) for i, s in enumerate(scores)]
    return FrameObservation(dets, rng.standard_normal((4, d)), rng.standard_normal((4, d)))


def test_prepare_frame_splits_by_tau_q():
    obs = _obs([0.9, 0.1, 0.3, 0.29, 0.05])
    inp = prepare_frame(obs, AssociatorConfig())
    assert inp.kept.tolist() == [0, 2]
    # rejected pool, highest score first
    expected = obs.contents[[3, 1, 4]]
    assert np.allclose(inp.noisy_raw.numpy(), expected, atol=1e-6)
    pooled = prepare_frame(obs, AssociatorConfig(noisy_pool="all"))
    assert np.allclose(pooled.noisy_raw.numpy()[0], obs.contents[0], atol=1e-6)


# -- the attention block -----------------------------------------------------------


def test_single_key_returns_v1():
    bii = literal_bii(4)
    q, k, v1, v2 = rand(3, 4), rand(1, 4), rand(1, 4), rand(3, 4)
    out = bii(q, k, v1, v2)
    assert torch.allclose(out - v2, v1.expand(3, 4), atol=1e-12)


def test_hand_instance_two_by_two():
    q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=D)
    k = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=D)
    v1 = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=D)
    v2 = torch.tensor([[0.5, 0.0], [0.0, 0.5]], dtype=D)
    out = literal_bii(2)(q, k, v1, v2).detach().numpy()
    assert np.abs(out - literal_attention(q, k, v1, v2)).max() < 1e-6
    # softmax([1/sqrt 2, 0]) = [0.669762, 0.330238]
    assert np.allclose(out, [[2.160477, 2.660477], [2.339523, 3.839523]], atol=1e-6)


def test_literal_mode_matches_oracle_random():
    gen = torch.Generator().manual_seed(1)
    bii = literal_bii(6)
    for _ in range(20):
        nq, nk = torch.randint(1, 5, (2,), generator=gen).tolist()
        q, k, v1, v2 = rand(nq, 6, gen=gen), rand(nk, 6, gen=gen), rand(nk, 6, gen=gen), rand(nq, 6, gen=gen)
        assert np.abs(bii(q, k, v1, v2).detach().numpy() - literal_attention(q, k, v1, v2)).max() < 1e-6


@pytest.mark.parametrize("heads", [1, 8])
def test_attention_rows_sum_to_one(heads):
    bii = BII(64, n_heads=heads).double()
    _, w = bii.attend(rand(5, 64), rand(7, 64), rand(7, 64), rand(5, 64))
    assert w.shape == (heads, 5, 7)
    assert torch.allclose(w.sum(-1), torch.ones(heads, 5, dtype=D), atol=1e-6)


def test_bundle_shape_errors():
    bii = BII(8)
    with pytest.raises(ValueError):
        bii(torch.zeros(2, 8), torch.zeros(3, 8), torch.zeros(2, 8), torch.zeros(2, 8))
    with pytest.raises(ValueError):
        bii(torch.zeros(2, 8), torch.zeros(3, 8), torch.zeros(3, 8), torch.zeros(1, 8))


def test_all_zero_contents_stay_finite():
    bii = BII(8)
    bii.ffn.zero_()
    out = bii(torch.zeros(3, 8), torch.zeros(3, 8), torch.zeros(3, 8), torch.zeros(3, 8))
    assert torch.isfinite(out).all()


def test_band_permutation():
    perm = band_permutation(64, 8)
    assert torch.equal(perm.sum(0), torch.ones(64)) and torch.equal(perm.sum(1), torch.ones(64))
    # head 1, coordinate cy (index 1), first dim <- input dim 16 + 2
    assert perm[8 + 2, 16 + 2] == 1.0
    assert torch.equal(band_permutation(64, 1), torch.eye(64))
    assert torch.equal(band_permutation(24, 4), torch.eye(24))


def test_pooled_offsets_ignore_track_columns():
    w = torch.tensor([[[0.2, 0.2, 0.6], [0.0, 0.5, 0.5]]], dtype=D)
    det = torch.tensor([[0.2, 0.2, 0.1, 0.1], [0.6, 0.4, 0.1, 0.1]], dtype=D)
    boxes = torch.tensor([[0.3, 0.3, 0.1, 0.1], [0.5, 0.5, 0.2, 0.2]], dtype=D)
    off = pooled_offsets(w, det, boxes)
    pooled0 = 0.5 * det[0] + 0.5 * det[1]
    assert torch.allclose(off[0], inverse_sigmoid(pooled0) - inverse_sigmoid(boxes[0]))
    assert torch.allclose(off[1], inverse_sigmoid(det[1]) - inverse_sigmoid(boxes[1]))
    assert torch.equal(pooled_offsets(w[:, :, 2:], det[:0], boxes), torch.zeros(2, 4, dtype=D))


# -- the two update directions -------------------------------------------------------


@pytest.fixture
def literal_model():
    torch.manual_seed(0)
    return Associator(AssociatorConfig(d_model=8, n_heads=1, ffn_dim=8), literal_bii=True).double()


def _pe(boxes):
    return np.array([scalar_sine(b, 8) for b in boxes.tolist()])


def _boxes(n, gen):
    return torch.cat([0.2 + 0.6 * torch.rand(n, 2, dtype=D, generator=gen), 0.05 + 0.1 * torch.rand(n, 2, dtype=D, generator=gen)], 1)


def test_detection_update_bundle(literal_model):
    gen = torch.Generator().manual_seed(2)
    det, tracks, noisy = rand(3, 8, gen=gen), rand(2, 8, gen=gen), rand(2, 8, gen=gen)
    db, tb = _boxes(3, gen), _boxes(2, gen)
    out, _ = literal_model.update_detections(det, db, tracks, tb, noisy)
    d_full = det.numpy() + _pe(db)
    t_full = tracks.numpy() + _pe(tb)
    want = literal_attention(d_full, np.vstack([d_full, t_full]), np.vstack([det.numpy(), noisy.numpy()]), det.numpy())
    assert np.abs(out.detach().numpy() - want).max() < 1e-6


def test_track_update_bundle(literal_model):
    gen = torch.Generator().manual_seed(3)
    tracks, hist, det = rand(2, 8, gen=gen), rand(2, 8, gen=gen), rand(2, 8, gen=gen)
    tb, db = _boxes(2, gen), _boxes(2, gen)
    out, _ = literal_model.update_tracks(tracks, tb, hist, det, db)
    t_pos = _pe(tb)
    keys = np.vstack([det.numpy() + _pe(db), hist.numpy() + t_pos])
    want = literal_attention(tracks.numpy() + t_pos, keys, np.vstack([det.numpy(), hist.numpy()]), tracks.numpy())
    assert np.abs(out.detach().numpy() - want).max() < 1e-6


def test_track_key_block_only_carries_noise(literal_model):
    gen = torch.Generator().manual_seed(4)
    det, tracks = rand(3, 8, gen=gen), rand(2, 8, gen=gen)
    db, tb = _boxes(3, gen), _boxes(2, gen)
    base, _ = literal_model.update_detections(det, db, tracks, tb, torch.zeros(2, 8, dtype=D))
    w = literal_model.bii_det.last_weights[0]
    bump = rand(2, 8, gen=gen)
    moved, _ = literal_model.update_detections(det, db, tracks, tb, bump)
    assert torch.allclose(moved - base, w[:, 3:] @ bump, atol=1e-10)


def test_detection_update_without_tracks_is_self_attention(literal_model):
    gen = torch.Generator().manual_seed(5)
    det, db = rand(3, 8, gen=gen), _boxes(3, gen)
    empty = torch.zeros(0, 8, dtype=D)
    out, _ = literal_model.update_detections(det, db, empty, torch.zeros(0, 4, dtype=D), empty)
    full = det + literal_model.position(db)
    assert torch.allclose(out, literal_model.bii_det(full, full, det, det))


def test_track_update_without_detections_uses_history(literal_model):
    gen = torch.Generator().manual_seed(6)
    tracks, hist, tb = rand(2, 8, gen=gen), rand(2, 8, gen=gen), _boxes(2, gen)
    out, hints = literal_model.update_tracks(tracks, tb, hist, torch.zeros(0, 8, dtype=D), torch.zeros(0, 4, dtype=D))
    pos = literal_model.position(tb)
    assert torch.allclose(out, literal_model.bii_track(tracks + pos, hist + pos, hist, tracks))
    assert torch.equal(hints, torch.zeros(2, 4, dtype=D))


def test_no_tracks_gives_empty_output(literal_model):
    gen = torch.Generator().manual_seed(7)
    out, _ = literal_model.update_tracks(
        torch.zeros(0, 8, dtype=D), torch.zeros(0, 4, dtype=D), torch.zeros(0, 8, dtype=D), rand(2, 8, gen=gen), _boxes(2, gen)
    )
    assert out.shape == (0, 8)


def test_noisy_rows_must_match_tracks(literal_model):
    with pytest.raises(ValueError):
        literal_model.update_detections(rand(2, 8), _boxes(2, None), rand(2, 8), _boxes(2, None), rand(1, 8))


def test_branches_have_disjoint_parameters():
    m = Associator(AssociatorConfig())
    a = {id(p) for p in m.bii_det.parameters()}
    b = {id(p) for p in m.bii_track.parameters()}
    assert a and b and not a & b


# -- history -------------------------------------------------------------------------


def test_history_birth_and_weights():
    t0 = np.array([0.3, -1.0])
    h0 = update_history(t0, None, 0.7)
    assert np.array_equal(h0, t0) and h0 is not t0
    assert np.allclose(update_history(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.7), [0.7, 0.3], rtol=0, atol=1e-9)
    assert np.array_equal(update_history(np.array([2.0, 3.0]), np.array([9.0, 9.0]), 1.0), [2.0, 3.0])


def test_history_errors():
    with pytest.raises(ValueError):
        update_history(np.zeros(2), np.zeros(3), 0.7)
    with pytest.raises(ValueError):
        update_history(np.zeros(2), np.zeros(2), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 1.0), st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_history_telescopes_to_constant(w, t, h0):
    t, h = np.array(t), np.array(h0)
    for _ in range(400):
        h = update_history(t, h, w)
    assert np.abs(h - t).max() < 1e-6


def test_history_torch_clone():
    t = torch.ones(3, requires_grad=True)
    h = update_history(t, None, 0.7)
    assert h is not t and torch.equal(h, t)


def test_full_query_tracks_box_changes():
    q = ObjectQuery(np.zeros(8), BoundingBox(0.2, 0.2, 0.1, 0.1), 0.9)
    before = q.full()
    q.box = BoundingBox(0.7, 0.2, 0.1, 0.1)
    assert not np.allclose(before, q.full())


# -- alignment and decoding ----------------------------------------------------------


def _cpa(hint_dim=4):
    torch.manual_seed(0)
    return CPA(16, 2, 32, 20.0, hint_dim=hint_dim).double()


def test_cpa_identity_at_init_without_hints():
    cpa = _cpa()
    boxes = torch.tensor([[0.3, 0.4, 0.1, 0.2], [0.0, 1.0, 0.05, 0.05]], dtype=D)
    _, out = cpa(rand(2, 16), boxes, rand(6, 16), rand(6, 16), torch.zeros(2, 4, dtype=D))
    assert torch.allclose(out[0], boxes[0], atol=1e-12)
    # exact 0 and 1 are clamped before the inverse sigmoid
    assert torch.isfinite(out).all() and torch.allclose(out[1], boxes[1], atol=1e-5)


def test_cpa_hint_moves_box_onto_pooled_detection():
    cpa = _cpa()
    boxes = torch.tensor([[0.3, 0.4, 0.1, 0.2]], dtype=D)
    target = torch.tensor([[0.35, 0.38, 0.12, 0.2]], dtype=D)
    hints = inverse_sigmoid(target) - inverse_sigmoid(boxes)
    _, out = cpa(rand(1, 16), boxes, rand(6, 16), rand(6, 16), hints)
    assert torch.allclose(out, target, atol=1e-9)


def test_cpa_empty_and_bad_hints():
    cpa = _cpa()
    x, b = cpa(torch.zeros(0, 16, dtype=D), torch.zeros(0, 4, dtype=D), rand(6, 16), rand(6, 16))
    assert x.shape == (0, 16) and b.shape == (0, 4)
    with pytest.raises(ValueError):
        cpa(rand(2, 16), torch.full((2, 4), 0.3, dtype=D), rand(6, 16), rand(6, 16))


def test_cpa_attention_rows_sum_to_one():
    cpa = _cpa(hint_dim=0)
    cpa(rand(3, 16), torch.full((3, 4), 0.3, dtype=D), rand(6, 16), rand(6, 16))
    assert torch.allclose(cpa.last_weights.sum(-1), torch.ones(2, 3, dtype=D))


def test_cpa_box_head_gradient_matches_finite_differences():
    cpa = CPA(8, 1, 8, 20.0, hint_dim=4).double()
    gen = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for p in cpa.delta.parameters():
            p.normal_(0, 0.2, generator=gen)
    content, mem, pos = rand(3, 8, gen=gen), rand(5, 8, gen=gen), rand(5, 8, gen=gen)
    boxes = _boxes(3, gen)
    hints = 0.1 * rand(3, 4, gen=gen)
    target = _boxes(3, gen)

    def loss():
        return (cpa(content, boxes, mem, pos, hints)[1] - target).abs().sum()

    params = list(cpa.delta.parameters()) + list(cpa.hint_proj.parameters())
    cpa.zero_grad()
    loss().backward()
    eps = 1e-6
    worst = 0.0
    for p in params:
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            v = flat[i].item()
            flat[i] = v + eps
            up = loss().item()
            flat[i] = v - eps
            down = loss().item()
            flat[i] = v
            num = (up - down) / (2 * eps)
            ana = p.grad.view(-1)[i].item()
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-4))
    assert worst < 1e-3


def test_refine_boxes_linear_space_is_clamped():
    out = refine_boxes(torch.tensor([[0.5, 0.5, 0.1, 0.1]]), torch.tensor([[0.7, -0.7, 0.0, 0.0]]), "linear")
    assert out.min() > 0 and out.max() < 1


def test_decoder_zero_score_head_gives_half():
    dec = DecoderLayer(16, 2, 32, 20.0).double()
    torch.nn.init.zeros_(dec.score_head.weight)
    torch.nn.init.zeros_(dec.score_head.bias)
    logits, boxes, _ = dec(rand(4, 16), torch.full((4, 4), 0.3, dtype=D), rand(6, 16), rand(6, 16))
    assert torch.equal(torch.sigmoid(logits), torch.full((4,), 0.5, dtype=D))
    assert torch.allclose(boxes, torch.full((4, 4), 0.3, dtype=D))


def test_decoder_is_permutation_equivariant():
    torch.manual_seed(1)
    dec = DecoderLayer(16, 2, 32, 20.0).double()
    gen = torch.Generator().manual_seed(2)
    x, b, mem, pos = rand(5, 16, gen=gen), _boxes(5, gen), rand(6, 16, gen=gen), rand(6, 16, gen=gen)
    perm = torch.tensor([3, 0, 4, 1, 2])
    l1, b1, e1 = dec(x, b, mem, pos)
    l2, b2, e2 = dec(x[perm], b[perm], mem, pos)
    assert torch.allclose(l1[perm], l2, atol=1e-10)
    assert torch.allclose(b1[perm], b2, atol=1e-10)
    assert torch.allclose(e1[perm], e2, atol=1e-10)


def _frame_inputs(gen, n_det=4, n_track=2, d=64):
    return dict(
        det_raw=rand(n_det, d, gen=gen),
        det_boxes=_boxes(n_det, gen),
        track_content=rand(n_track, d, gen=gen),
        track_boxes=_boxes(n_track, gen),
        track_history=rand(n_track, d, gen=gen),
        noisy_raw=rand(1, d, gen=gen),
        features=rand(16, d, gen=gen),
        positions=rand(16, d, gen=gen),
    )


def test_frame_is_equivariant_to_detection_order():
    torch.manual_seed(3)
    model = Associator(AssociatorConfig()).double().eval()
    inp = _frame_inputs(torch.Generator().manual_seed(4))
    a = model.forward_frame(**inp)
    perm = torch.tensor([2, 0, 3, 1])
    inp2 = dict(inp, det_raw=inp["det_raw"][perm], det_boxes=inp["det_boxes"][perm])
    b = model.forward_frame(**inp2)
    assert torch.allclose(a.logits[:2], b.logits[:2], atol=1e-10)
    assert torch.allclose(a.logits[2:][perm], b.logits[2:], atol=1e-10)
    assert torch.allclose(a.boxes[2:][perm], b.boxes[2:], atol=1e-10)


def test_every_attention_map_is_normalized():
    torch.manual_seed(5)
    model = Associator(AssociatorConfig()).double().eval()
    out = model.forward_frame(**_frame_inputs(torch.Generator().manual_seed(6)))
    assert set(out.attention) == {"decoder_self", "decoder_cross", "bii_det", "bii_track", "cpa"}
    for name, w in out.attention.items():
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6), name
    assert out.logits.shape == (6,) and out.aux_boxes.shape == (6, 4)


def test_first_frame_skips_interaction():
    model = Associator(AssociatorConfig()).double().eval()
    inp = _frame_inputs(torch.Generator().manual_seed(7), n_track=0)
    out = model.forward_frame(**inp)
    assert out.n_tracks == 0 and out.aux_logits is None
    assert "bii_det" not in out.attention


def test_zero_noisy_mode_ignores_negatives():
    model = Associator(AssociatorConfig(noisy_queries="zeros"))
    assert torch.equal(model.noisy_values(torch.ones(3, 64), 2), torch.zeros(2, 64))
    hard = Associator(AssociatorConfig())
    assert hard.noisy_values(torch.ones(1, 64), 3)[1:].abs().sum() == 0


@pytest.mark.parametrize(
    "bad",
    [dict(d_model=60), dict(n_heads=7), dict(tau_q=0.0), dict(ema_weight=1.5), dict(box_space="pixels"), dict(bii_heads=3)],
)
def test_config_validation(bad):
    with pytest.raises(ValueError):
        AssociatorConfig(**bad)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = Associator(AssociatorConfig(d_model=16, n_heads=2, ffn_dim=16))
    save_checkpoint(model, tmp_path / "m.pt", extra={"note": 1})
    loaded, extra = load_checkpoint(tmp_path / "m.pt", expected=model.cfg)
    assert extra == {"note": 1}
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k


def test_checkpoint_fingerprint_mismatch(tmp_path):
    model = Associator(AssociatorConfig(d_model=16, n_heads=2, ffn_dim=16))
    save_checkpoint(model, tmp_path / "m.pt")
    with pytest.raises(FingerprintMismatch):
        load_checkpoint(tmp_path / "m.pt", expected=AssociatorConfig(d_model=16, n_heads=2, ffn_dim=16, tau_q=0.4))
    payload = torch.load(tmp_path / "m.pt", weights_only=False)
    payload["config"]["ema_weight"] = 0.5
    torch.save(payload, tmp_path / "tampered.pt")
    with pytest.raises(FingerprintMismatch):
        load_checkpoint(tmp_path / "tampered.pt")
