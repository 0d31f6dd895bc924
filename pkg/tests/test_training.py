from dataclasses import replace

import numpy as np
import pytest
import torch

from hystar.checkpoint import decode, encode, load_checkpoint, save_checkpoint, state_tensors
from hystar.data import DatasetConfig, generate, split_instances
from hystar.encoder import EncoderConfig
from hystar.errors import ChecksumError, ConfigError, ContractError, FormatError, NumericAbort, ShapeError, VersionError
from hystar.losses import LossConfig
from hystar.seeding import numpy_rng, substream_seed
from hystar.training import (
    GAMMA_SWEEP,
    LAMBDA_SWEEP,
    METRICS_COLUMNS,
    TrainConfig,
    build_model,
    embed,
    epoch_batches,
    evaluate,
    metrics_rows,
    retrieval_ranks,
    run,
    run_sweep,
    train,
    training_anchors,
    write_csv,
)

ENC = EncoderConfig(image_size=32, patch_size=8, d_model=16, n_heads=2, n_layers=2,
                    injected_layers=[1], embed_dim=8, d_style=8)


@pytest.fixture(scope="module")
def ds():
    return generate(DatasetConfig(n_classes=4, samples_per_class_per_style=5, seed=7))


def small_cfg(**kw):
    base = dict(batch_size=8, epochs=2, eval_every=1, lr_hyper=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def params_snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(loss="hinge")
    with pytest.raises(ConfigError):
        TrainConfig(ablation_mode="dynamic_mlp")
    with pytest.raises(ConfigError):
        TrainConfig(lr_static=-1.0)


def test_sweep_grids():
    assert GAMMA_SWEEP == (1, 10, 30, 50, 80, 120, 200, 500)
    assert 1.0 in LAMBDA_SWEEP and all(a < b for a, b in zip(LAMBDA_SWEEP, LAMBDA_SWEEP[1:]))


def test_substreams_are_independent_and_stable():
    assert substream_seed(0, "init", "encoder") == substream_seed(0, "init", "encoder")
    assert substream_seed(0, "init", "encoder") != substream_seed(0, "init", "style")
    assert substream_seed(0, "batching", 1) != substream_seed(1, "batching", 1)


def test_batches_have_unique_instances(ds):
    train_inst, _ = split_instances(ds, 0.2, ds.config.seed)
    anchors = training_anchors(ds, train_inst)
    assert all(ds.items[i].style_id != 0 for i in anchors)
    batches = epoch_batches(ds, anchors, 8, numpy_rng(0, "batching", 1))
    placed = [i for b in batches for i in b]
    # a lone leftover cannot form a contrastive batch, so at most one anchor sits out
    assert len(placed) == len(set(placed)) and set(placed) <= set(anchors)
    assert len(anchors) - len(placed) <= 1
    for b in batches:
        keys = [(ds.items[i].class_id, ds.items[i].instance_id) for i in b]
        assert len(keys) == len(set(keys)) and 2 <= len(b) <= 8


def test_single_style_batches(ds):
    train_inst, _ = split_instances(ds, 0.2, ds.config.seed)
    anchors = training_anchors(ds, train_inst)
    for b in epoch_batches(ds, anchors, 8, numpy_rng(0, "batching", 1), single_style=True):
        assert len({ds.items[i].style_id for i in b}) == 1


def test_holdout_styles_excluded_from_training():
    held = generate(DatasetConfig(n_classes=3, samples_per_class_per_style=2, seed=1, holdout_styles=["art"]))
    anchors = training_anchors(held, {(c, i) for c in range(3) for i in range(2)})
    assert held.styles.index("art") not in {held.items[i].style_id for i in anchors}


def test_zero_learning_rates_leave_parameters_unchanged(ds):
    cfg = small_cfg(lr_static=0.0, lr_hyper=0.0, epochs=1, eval_every=0)
    model = build_model(ENC, cfg)
    before = params_snapshot(model)
    train(model, ds, cfg)
    for name, p in model.named_parameters():
        assert torch.equal(p, before[name]), name


def test_frozen_backbone_never_changes(ds):
    cfg = small_cfg(epochs=1, eval_every=0)
    model = build_model(ENC, cfg)
    buffers = {n: b.clone() for n, b in model.named_buffers()}
    train(model, ds, cfg)
    for n, b in model.named_buffers():
        assert torch.equal(b, buffers[n]), n


def test_parameter_partition(ds):
    model = build_model(ENC, small_cfg())
    groups = model.encoder.trainable_groups()
    assert model.encoder.proj in [p for p in groups["static"]]
    hyper_ids = {id(p) for net in model.encoder.attn_hypernets.values() for p in net.parameters()}
    assert {id(p) for p in groups["hyper"]} == hyper_ids
    assert not {id(p) for p in groups["static"]} & hyper_ids


def test_runs_are_deterministic(ds, tmp_path):
    cfg = small_cfg()
    _, h1 = run(ds, ENC, cfg)
    _, h2 = run(ds, ENC, cfg)
    write_csv(tmp_path / "a.csv", METRICS_COLUMNS, metrics_rows(h1, "r", 0, "x"))
    write_csv(tmp_path / "b.csv", METRICS_COLUMNS, metrics_rows(h2, "r", 0, "x"))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    _, h3 = run(ds, ENC, replace(cfg, seed=1))
    assert [r.loss for r in h3] != [r.loss for r in h1]


def test_loss_decreases_on_fixed_batch(ds):
    torch.manual_seed(0)
    cfg = small_cfg(lr_static=1e-2)
    model = build_model(ENC, cfg)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-2)
    from hystar.losses import compute_loss, similarity_matrix

    batch = ds.indices(1)[:8]
    x = torch.from_numpy(ds.images(batch + [ds.gallery_index(i) for i in batch]))
    losses = []
    for _ in range(100):
        emb = model(x)
        loss = compute_loss("stylence", similarity_matrix(emb[:8], emb[8:]), cfg.loss_config)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]


def test_metrics_csv_format(ds, tmp_path):
    _, history = run(ds, ENC, small_cfg(epochs=1))
    rows = metrics_rows(history, "run", 0, "hybrid")
    write_csv(tmp_path / "m.csv", METRICS_COLUMNS, rows)
    text = (tmp_path / "m.csv").read_bytes().decode()
    assert "\r" not in text
    lines = text.splitlines()
    assert lines[0] == "run_id,seed,config_label,epoch,style,top1,top5"
    assert {l.split(",")[4] for l in lines[1:]} == {"sketch", "lowres", "art", "mean"}


def test_numeric_abort_dumps_state(ds, tmp_path):
    cfg = small_cfg(epochs=1, loss_config=LossConfig(tau=1e-300))
    model = build_model(ENC, cfg)
    with pytest.raises(NumericAbort) as info:
        train(model, ds, cfg, dump_dir=tmp_path)
    assert info.value.dump_path is not None and info.value.dump_path.exists()
    assert "step=0" in (tmp_path / "abort_state.txt").read_text()


def test_too_few_anchors(ds):
    with pytest.raises(ContractError):
        train(build_model(ENC, small_cfg()), ds, small_cfg(batch_size=500))


# -- evaluation ---------------------------------------------------------------

def test_ranks_copied_embeddings_are_perfect(gen):
    g = torch.randn(10, 4, generator=gen)
    ranks = retrieval_ranks(g.clone(), g, list(range(10)))
    assert (ranks == 0).all()


def test_ranks_ties_go_to_lower_index():
    gallery = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    q = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    assert retrieval_ranks(q, gallery, [0, 1]).tolist() == [0, 1]


def test_random_embeddings_top1_near_chance(gen):
    G = 20
    hits = []
    for _ in range(200):
        ranks = retrieval_ranks(torch.randn(G, 6, generator=gen), torch.randn(G, 6, generator=gen), list(range(G)))
        hits.append(np.mean(ranks < 1))
    assert abs(100 * np.mean(hits) - 100 / G) < 1.5


def test_evaluate_does_not_mutate_model(ds):
    model = build_model(ENC, small_cfg())
    model.train()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    _, held = split_instances(ds, 0.2, ds.config.seed)
    m1 = evaluate(model, ds, held)
    m2 = evaluate(model, ds, held)
    assert model.training
    assert all(torch.equal(v, before[k]) for k, v in model.state_dict().items())
    assert m1 == m2 and set(m1.top1) == {"sketch", "lowres", "art"}


def test_sweep_rejects_unknown_parameter(ds):
    with pytest.raises(ConfigError):
        run_sweep(ds, ENC, small_cfg(), "tau")


def test_sweep_labels(ds):
    res = run_sweep(ds, ENC, small_cfg(epochs=1), "gamma", values=[1.0, 80.0])
    assert [r["label"] for r in res] == ["gamma=1", "gamma=80"]


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(ds, tmp_path):
    model, _ = run(ds, ENC, small_cfg(epochs=1))
    save_checkpoint(model, tmp_path / "m.hyst")
    fresh = build_model(ENC, small_cfg(epochs=1, seed=9))
    load_checkpoint(fresh, tmp_path / "m.hyst")
    x = torch.from_numpy(ds.images(list(range(12))))
    with torch.no_grad():
        assert torch.equal(model(x), fresh(x))
    assert encode(state_tensors(fresh)) == (tmp_path / "m.hyst").read_bytes()


def test_checkpoint_tensor_count(ds):
    model = build_model(ENC, small_cfg())
    blob = encode(state_tensors(model))
    assert int.from_bytes(blob[5:9], "little") == len(model.state_dict())
    assert set(decode(blob)) == set(model.state_dict())


def test_checkpoint_float64_tag():
    blob = encode({"w": torch.arange(3, dtype=torch.float64)})
    out = decode(blob)
    assert out["w"].dtype == np.float64 and out["w"].tolist() == [0.0, 1.0, 2.0]


def test_checkpoint_corruption_detected(ds, tmp_path):
    model = build_model(ENC, small_cfg())
    blob = bytearray(encode(state_tensors(model)))
    tampered = bytearray(blob)
    tampered[4] = 2
    with pytest.raises(VersionError):
        decode(bytes(tampered))
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 1
    with pytest.raises(ChecksumError):
        decode(bytes(flipped))
    with pytest.raises(FormatError):
        decode(b"NOPE" + bytes(blob[4:]))
    with pytest.raises(ChecksumError):
        decode(bytes(blob[:-10]))


def test_checkpoint_shape_mismatch(ds, tmp_path):
    model = build_model(ENC, small_cfg())
    save_checkpoint(model, tmp_path / "m.hyst")
    other = build_model(replace(ENC, embed_dim=6), small_cfg())
    with pytest.raises(ShapeError):
        load_checkpoint(other, tmp_path / "m.hyst")


def test_reversed_mode_checkpoint_keeps_tying(ds, tmp_path):
    cfg = small_cfg(ablation_mode="reversed", epochs=1)
    model, _ = run(ds, ENC, cfg)
    save_checkpoint(model, tmp_path / "r.hyst")
    fresh = build_model(ENC, cfg)
    load_checkpoint(fresh, tmp_path / "r.hyst")
    blk = fresh.encoder.blocks[0]
    assert blk.k.delta_s_static is blk.q.delta_s_static
    assert torch.equal(blk.q.delta_s_static, model.encoder.blocks[0].q.delta_s_static)


def test_embed_chunking_invariant(ds):
    model = build_model(ENC, small_cfg())
    idx = list(range(20))
    assert torch.allclose(embed(model, ds, idx, chunk=3), embed(model, ds, idx, chunk=128), atol=1e-6)
