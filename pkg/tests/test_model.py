import json

import numpy as np
import pytest
import torch

from accident_hud.abm import AbmConfig
from accident_hud.imagery import DatasetManifest, ManifestEntry
from accident_hud.model import (ClassScores, HotspotClassifier, TinyBackbone, build_classifier, classify,
                                load_checkpoint, save_checkpoint)
from accident_hud.synthetic import separable_images, write_png
from accident_hud.training import TrainConfig, TrainingDiverged, binary_metrics, train


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    entries = []
    for i, (img, label) in enumerate(separable_images(12, 64, seed=5)):
        p = root / f"{i}.png"
        write_png(p, img)
        entries.append(ManifestEntry(str(p), label, "train" if i < 8 else ("val" if i < 10 else "test")))
    return DatasetManifest(entries)


def test_scores_sum_to_one(rng):
    model = build_classifier()
    for _ in range(3):
        x = rng.normal(size=(224, 224, 3)).astype(np.float32)
        s = classify(x, model)
        assert 0 <= s.p_hotspot <= 1 and abs(s.p_hotspot + s.p_non_hotspot - 1) < 1e-6


def test_equal_logits_half():
    model = build_classifier()
    with torch.no_grad():
        model.fc.weight.zero_()
        model.fc.bias.zero_()
    s = classify(np.zeros((224, 224, 3), np.float32), model)
    assert (s.p_hotspot, s.p_non_hotspot) == (0.5, 0.5)
    assert ClassScores(0.5, 0.5).predicted == "hotspot"


def test_argmax_invariant_to_logit_shift():
    logits = torch.tensor([[0.3, -1.2], [2.0, 2.5]])
    a = torch.softmax(logits, 1).argmax(1)
    b = torch.softmax(logits + 7.0, 1).argmax(1)
    assert torch.equal(a, b)


def test_determinism_replay(rng):
    x = rng.normal(size=(224, 224, 3)).astype(np.float32)
    outs = []
    for _ in range(2):
        torch.manual_seed(11)
        outs.append(classify(x, build_classifier()))
    assert outs[0] == outs[1]


def test_classify_rejects_wrong_size():
    with pytest.raises(ValueError):
        classify(np.zeros((100, 100, 3), np.float32), build_classifier())


def test_tiny_backbone_shape():
    feats = TinyBackbone()(torch.zeros(2, 3, 224, 224))
    assert feats.shape == (2, 32, 28, 28)
    clf = HotspotClassifier(TinyBackbone(), AbmConfig("d", 8))
    assert clf(torch.zeros(2, 3, 224, 224)).shape == (2, 2)


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(2)
    model = build_classifier(abm=AbmConfig("d", 8)).eval()
    save_checkpoint(tmp_path / "m.pt", model, seed=2)
    meta = json.loads((tmp_path / "m.json").read_text())
    assert meta["abm_variant"] == "d" and meta["backbone"] == "tiny" and meta["seed"] == 2
    loaded, _ = load_checkpoint(tmp_path / "m.pt")
    x = torch.randn(1, 3, 224, 224)
    with torch.no_grad():
        assert torch.equal(model(x), loaded(x))


def test_default_train_config():
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.learning_rate, c.momentum, c.mode) == (500, 8, 0.001, 0.9, "full")
    with pytest.raises(ValueError):
        TrainConfig(mode="partial")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_binary_metrics_cases():
    y = [0, 0, 1, 1]
    m = binary_metrics(y, y)
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)
    m = binary_metrics(y, [0, 0, 0, 0])
    assert m.accuracy == 0.5 and m.recall == 1.0


def test_binary_metrics_count_oracle(rng):
    y = rng.integers(0, 2, 50)
    p = rng.integers(0, 2, 50)
    tp = sum(1 for a, b in zip(y, p) if a == 0 and b == 0)
    fp = sum(1 for a, b in zip(y, p) if a == 1 and b == 0)
    fn = sum(1 for a, b in zip(y, p) if a == 0 and b == 1)
    tn = 50 - tp - fp - fn
    m = binary_metrics(y, p)
    prec, rec = tp / (tp + fp), tp / (tp + fn)
    assert (m.tp, m.fp, m.fn, m.tn) == (tp, fp, fn, tn)
    assert m.accuracy == pytest.approx((tp + tn) / 50)
    assert m.f1 == pytest.approx(2 * prec * rec / (prec + rec))


def test_fc_only_freezes_backbone(small_manifest):
    torch.manual_seed(0)
    model = build_classifier()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(small_manifest, TrainConfig(epochs=2, batch_size=4, mode="fc_only"), model)
    after = model.state_dict()
    for k in before:
        if k.startswith(("backbone.", "abm.")):
            assert torch.equal(before[k], after[k]), k
    assert not torch.equal(before["fc.weight"], after["fc.weight"])


def test_train_history_and_log(small_manifest, tmp_path):
    torch.manual_seed(0)
    model = build_classifier()
    seen = []
    res = train(small_manifest, TrainConfig(epochs=3, batch_size=4), model, log_path=tmp_path / "log.csv",
                on_epoch=lambda row, m: seen.append(row["epoch"]) or row["epoch"] == 2)
    assert seen == [1, 2] and len(res.history) == 2
    assert res.test is not None
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_acc" and len(lines) == 3


def test_divergence_detected(small_manifest):
    model = build_classifier()
    with torch.no_grad():
        model.fc.weight.fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        train(small_manifest, TrainConfig(epochs=1, batch_size=4), model)
