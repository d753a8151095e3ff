import numpy as np
import pytest
import torch
from sklearn.exceptions import NotFittedError

from styleforge import corpus, spkemb, vc
from styleforge.errors import DataError, InvalidInput
from styleforge.spkemb import SpeakerEmbedding
from styleforge.vc import (
    SpeakerAssets,
    UtteranceFeatures,
    VcLatent,
    VcModel,
    VoiceConverter,
    beta_schedule,
    convert_utterance,
    decode_frames,
    encode_phonetic,
    encode_reference,
    kl_divergence,
    train_vc,
    vc_loss,
)

torch.set_num_threads(1)


def unit_vec(seed=0, dim=64):
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return VcModel(n_mels=80)


class TestEncodeReference:
    @pytest.mark.parametrize("t", [1, 7, 8, 9, 100, 171])
    def test_output_length_equals_input(self, model, t):
        mel = np.random.default_rng(t).standard_normal((t, 80))
        up, latent = encode_reference(model, mel, unit_vec(), sample=False)
        assert up.shape == (t, model.latent_dim)
        assert latent.mu.shape[0] == -(-t // model.bottleneck)

    def test_mean_mode_deterministic(self, model):
        mel = np.random.default_rng(1).standard_normal((30, 80))
        a, _ = encode_reference(model, mel, unit_vec(), sample=False)
        b, _ = encode_reference(model, mel, unit_vec(), sample=False)
        assert torch.equal(a, b)

    def test_sampling_uses_generator(self, model):
        mel = np.random.default_rng(2).standard_normal((24, 80))
        g1 = torch.Generator().manual_seed(5)
        g2 = torch.Generator().manual_seed(5)
        a, _ = encode_reference(model, mel, unit_vec(), sample=True,
                                generator=g1)
        b, _ = encode_reference(model, mel, unit_vec(), sample=True,
                                generator=g2)
        assert torch.equal(a, b)

    def test_standard_normal_latent_zero_kl(self):
        latent = VcLatent(z=torch.zeros(4, 16), mu=torch.zeros(4, 16),
                          log_sigma=torch.zeros(4, 16))
        assert float(kl_divergence(latent)) == 0.0


class TestEncodePhonetic:
    def test_shape_contract(self, model):
        states = np.random.default_rng(3).integers(0, 63, 40)
        out = encode_phonetic(model, states, unit_vec())
        assert out.shape == (40, 128)

    def test_identical_inputs_identical_outputs(self, model):
        states = np.random.default_rng(4).integers(0, 63, 25)
        a = encode_phonetic(model, states, unit_vec(7))
        b = encode_phonetic(model, states, unit_vec(7))
        assert torch.equal(a, b)

    def test_central_perturbation_changes_that_frame(self, model):
        states = np.random.default_rng(5).integers(0, 62, 31)
        base = encode_phonetic(model, states, unit_vec())
        poked = states.copy()
        poked[15] = (poked[15] + 1) % 63
        out = encode_phonetic(model, poked, unit_vec())
        assert not torch.allclose(base[15], out[15])

    def test_unknown_state_rejected(self, model):
        with pytest.raises(InvalidInput):
            encode_phonetic(model, np.array([0, 99]), unit_vec())
        with pytest.raises(InvalidInput):
            encode_phonetic(model, np.array([-1, 2]), unit_vec())

    def test_accepts_state_sequence(self, model):
        from styleforge.align import StateSequence
        seq = StateSequence(state_ids=np.arange(10) % 63)
        out = encode_phonetic(model, seq, unit_vec())
        assert out.shape == (10, 128)


class TestDecodeFrames:
    def test_frame_count_and_determinism(self, model):
        t = 19
        rng = np.random.default_rng(6)
        ref = rng.standard_normal((t, 16))
        phon = rng.standard_normal((t, 128))
        f0 = rng.standard_normal(t)
        a = decode_frames(model, ref, phon, f0, unit_vec())
        b = decode_frames(model, ref, phon, f0, unit_vec())
        assert a.frames.shape == (t, 80)
        np.testing.assert_array_equal(a.frames, b.frames)

    def test_length_mismatch_rejected(self, model):
        rng = np.random.default_rng(7)
        with pytest.raises(InvalidInput):
            decode_frames(model, rng.standard_normal((5, 16)),
                          rng.standard_normal((6, 128)),
                          rng.standard_normal(5), unit_vec())

    def test_f0_conditioning_reaches_output(self, model):
        # gradient flow: finite difference on one f0 value moves frames
        t = 16
        rng = np.random.default_rng(8)
        ref = rng.standard_normal((t, 16))
        phon = rng.standard_normal((t, 128))
        f0 = rng.standard_normal(t)
        base = decode_frames(model, ref, phon, f0, unit_vec())
        poked = f0.copy()
        poked[4] += 1.0
        out = decode_frames(model, ref, phon, poked, unit_vec())
        assert not np.allclose(base.frames, out.frames)


class TestVcLoss:
    def test_perfect_reconstruction_standard_latent(self):
        latent = VcLatent(z=torch.zeros(2, 16), mu=torch.zeros(2, 16),
                          log_sigma=torch.zeros(2, 16))
        parts = vc_loss(torch.zeros(4, 80), torch.zeros(4, 80), latent, 1e-3)
        assert float(parts.total) == 0.0

    def test_unit_mean_half_nat_per_dimension(self):
        d = 5
        latent = VcLatent(z=torch.ones(3, d), mu=torch.ones(3, d),
                          log_sigma=torch.zeros(3, d))
        assert float(kl_divergence(latent)) == pytest.approx(0.5 * d)

    def test_kl_non_negative(self):
        rng = torch.Generator().manual_seed(9)
        for _ in range(20):
            mu = torch.randn(4, 6, generator=rng)
            ls = torch.randn(4, 6, generator=rng)
            latent = VcLatent(z=mu, mu=mu, log_sigma=ls)
            assert float(kl_divergence(latent)) >= 0.0

    def test_shape_mismatch_rejected(self):
        latent = VcLatent(z=torch.zeros(1, 2), mu=torch.zeros(1, 2),
                          log_sigma=torch.zeros(1, 2))
        with pytest.raises(InvalidInput):
            vc_loss(torch.zeros(3, 80), torch.zeros(4, 80), latent, 1e-3)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(10)
        pred = torch.randn(2, 6, dtype=torch.float64, requires_grad=True)
        target = torch.randn(2, 6, dtype=torch.float64)
        mu = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        ls = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        beta = 0.3

        def val(p, m, s):
            latent = VcLatent(z=m, mu=m, log_sigma=s)
            return float(vc_loss(p, target, latent, beta).total)

        latent = VcLatent(z=mu, mu=mu, log_sigma=ls)
        vc_loss(pred, target, latent, beta).total.backward()
        h = 1e-6
        for tensor, grad in ((pred, pred.grad), (mu, mu.grad), (ls, ls.grad)):
            for idx in np.ndindex(*tensor.shape):
                tp = tensor.detach().clone()
                tm = tensor.detach().clone()
                tp[idx] += h
                tm[idx] -= h
                if tensor is pred:
                    fd = (val(tp, mu.detach(), ls.detach())
                          - val(tm, mu.detach(), ls.detach())) / (2 * h)
                elif tensor is mu:
                    fd = (val(pred.detach(), tp, ls.detach())
                          - val(pred.detach(), tm, ls.detach())) / (2 * h)
                else:
                    fd = (val(pred.detach(), mu.detach(), tp)
                          - val(pred.detach(), mu.detach(), tm)) / (2 * h)
                assert float(grad[idx]) == pytest.approx(fd, rel=1e-4,
                                                         abs=1e-7)

    def test_beta_warmup_schedule(self):
        assert beta_schedule(0, 1000, beta=1e-3) == 0.0
        assert beta_schedule(50, 1000, beta=1e-3) == pytest.approx(5e-4)
        assert beta_schedule(100, 1000, beta=1e-3) == pytest.approx(1e-3)
        assert beta_schedule(999, 1000, beta=1e-3) == pytest.approx(1e-3)


def tiny_training_setup(n_speakers=3, n_utts=4, t_range=(24, 40), seed=0):
    rng = np.random.default_rng(seed)
    utts, features = [], {}
    speakers = {}
    for s in range(n_speakers):
        spk = f"spk{s}"
        speakers[spk] = {"gender": "f",
                         "role": "target" if s == 0 else "supporting"}
        base = 2.0 * rng.standard_normal(20)
        for i in range(n_utts):
            uid = f"{spk}_u{i}"
            t = int(rng.integers(*t_range))
            utts.append(corpus.Utterance(uid, spk, "neutral", ["aa"],
                                         f"{uid}.wav", "train"))
            features[uid] = UtteranceFeatures(
                utterance_id=uid, speaker_id=spk,
                mel=base + rng.standard_normal((t, 20)),
                states=rng.integers(0, 63, t),
                log_f0=5.0 + 0.1 * rng.standard_normal(t))
    man = corpus.Manifest(utterances=utts, speakers=speakers)
    torch.manual_seed(seed)
    encoder = spkemb.SpeakerEncoder(n_mels=20)
    return man, features, encoder


class TestTrainVc:
    def test_zero_steps_keeps_initial_weights(self):
        man, features, enc = tiny_training_setup()
        torch.manual_seed(0)
        reference = VcModel(n_mels=20)
        model, hist = train_vc(man, features, enc, stage1_steps=0,
                               stage2_steps=0, seed=0)
        for (na, pa), (nb, pb) in zip(sorted(reference.state_dict().items()),
                                      sorted(model.state_dict().items())):
            assert na == nb
            assert torch.equal(pa, pb)
        assert hist.losses == []

    def test_probe_l1_beats_mean_frame_baseline(self):
        man, features, enc = tiny_training_setup()
        model, hist = train_vc(man, features, enc, stage1_steps=60,
                               stage2_steps=0, batch_size=4, seed=0)
        frames = np.concatenate([f.mel for f in features.values()])
        mean_frame = frames.mean(axis=0)
        baseline = np.abs(frames - mean_frame).mean()
        assert hist.probe_l1_stage1 < baseline

    def test_same_seed_identical_weights(self):
        man, features, enc = tiny_training_setup()
        m1, _ = train_vc(man, features, enc, stage1_steps=3, stage2_steps=2,
                         batch_size=4, seed=4)
        m2, _ = train_vc(man, features, enc, stage1_steps=3, stage2_steps=2,
                         batch_size=4, seed=4)
        for (na, pa), (nb, pb) in zip(sorted(m1.state_dict().items()),
                                      sorted(m2.state_dict().items())):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_missing_features_listed(self):
        man, features, enc = tiny_training_setup()
        del features["spk1_u2"]
        with pytest.raises(DataError, match="spk1_u2"):
            train_vc(man, features, enc, stage1_steps=1, stage2_steps=0)


class TestConvertUtterance:
    def test_frame_count_preserved(self):
        man, features, enc = tiny_training_setup()
        torch.manual_seed(1)
        model = VcModel(n_mels=20)
        assets = {
            spk: SpeakerAssets(
                centroid=SpeakerEmbedding(unit_vec(i), speaker_id=spk),
                log_f0_mean=5.0 + 0.1 * i)
            for i, spk in enumerate(["spk0", "spk1"])
        }
        for uid in ("spk1_u0", "spk1_u1"):
            out = convert_utterance(model, features[uid], assets["spk1"],
                                    assets["spk0"])
            assert out.frames.shape == features[uid].mel.shape
            assert out.utterance_id == uid

    def test_undefined_mean_propagates(self):
        from styleforge.errors import UndefinedSpeakerMean
        man, features, enc = tiny_training_setup()
        torch.manual_seed(1)
        model = VcModel(n_mels=20)
        good = SpeakerAssets(centroid=SpeakerEmbedding(unit_vec()),
                             log_f0_mean=5.0)
        bad = SpeakerAssets(centroid=SpeakerEmbedding(unit_vec()),
                            log_f0_mean=float("nan"))
        with pytest.raises(UndefinedSpeakerMean):
            convert_utterance(model, features["spk1_u0"], bad, good)

    def test_round_trip_serialization(self, tmp_path):
        torch.manual_seed(2)
        model = VcModel(n_mels=20)
        vc.save_model(model, tmp_path / "vc")
        back = vc.load_model(tmp_path / "vc")
        mel = np.random.default_rng(3).standard_normal((17, 20))
        a, _ = encode_reference(model, mel, unit_vec(), sample=False)
        b, _ = encode_reference(back, mel, unit_vec(), sample=False)
        assert torch.allclose(a, b)


class TestFeatureBundle:
    def test_length_disagreement_rejected(self):
        with pytest.raises(InvalidInput):
            UtteranceFeatures("u", "s", mel=np.zeros((5, 20)),
                              states=np.zeros(4), log_f0=np.zeros(5))


class TestEstimator:
    def test_fit_transform(self):
        man, features, enc = tiny_training_setup()
        est = VoiceConverter(stage1_steps=2, stage2_steps=1, batch_size=4)
        assert est.get_params()["stage1_steps"] == 2
        est.fit(man, features, enc)
        assets_src = SpeakerAssets(SpeakerEmbedding(unit_vec(1)), 5.0)
        assets_tgt = SpeakerAssets(SpeakerEmbedding(unit_vec(2)), 5.1)
        outs = est.transform([features["spk1_u0"]], assets_src, assets_tgt)
        assert outs[0].frames.shape == features["spk1_u0"].mel.shape

    def test_unfitted_transform_raises(self):
        with pytest.raises(NotFittedError):
            VoiceConverter().transform([], None, None)
