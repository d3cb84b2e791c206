import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fuseid.embedding_store import SynthConfig, generate_synthetic, make_manifest, pair_samples
from fuseid.two_branch import ArchitectureSpec, build_model

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# Scaled-down architecture used wherever the 1024-wide default would only slow tests down.
SMALL_ARCH = dict(voice_hidden_dims=(32,), face_hidden_dims=(32,), fusion_dim=32,
                  post_fusion_hidden_dims=(32,))

ACCEPTANCE_SYNTH = SynthConfig(num_identities=50, latent_dim=16, voice_dim=64, face_dim=64,
                               clips_per_identity_train=20, clips_per_identity_test=8,
                               voice_noise_sigma=0.8, face_noise_sigma=0.2, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(num_identities=6, latent_dim=4, voice_dim=8, face_dim=6,
                      clips_per_identity_train=5, clips_per_identity_test=3,
                      voice_noise_sigma=0.1, face_noise_sigma=0.1, seed=3)
    records = generate_synthetic(cfg)
    return cfg, records, make_manifest(records)


@pytest.fixture(scope="session")
def small_pairs(small_synth):
    _, records, manifest = small_synth
    train, _ = pair_samples(records, "train", manifest.label_map)
    test, _ = pair_samples(records, "test", manifest.label_map)
    return train, test


@pytest.fixture
def small_model(small_synth):
    cfg, _, manifest = small_synth
    spec = ArchitectureSpec(cfg.voice_dim, cfg.face_dim, manifest.num_speakers, **SMALL_ARCH)
    return build_model(spec, seed=5)
