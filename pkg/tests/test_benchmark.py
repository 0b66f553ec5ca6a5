import numpy as np

from iflf.benchmark import BenchmarkConfig, desk_train_config, split_domains
from iflf.similarity import similarity_from_windowsets


def test_spec_overrides_replace_defaults():
    cfg = BenchmarkConfig()
    spec = cfg.spec(0, noise_std=0.1)
    assert spec.num_domains == cfg.num_sources + 1 and spec.num_classes == cfg.num_classes
    assert all(p.noise_std == 0.1 for p in spec.perturbations)
    assert desk_train_config(alpha=5e-4).alpha == 5e-4


def test_target_is_left_unnormalized():
    cfg = BenchmarkConfig(num_sources=2, duration_s=10)
    sources, target = split_domains(cfg.spec(0), 0)
    assert len(sources) == 2 and target.normalization_stats is None
    assert all(abs(float(ws.windows.mean())) < 0.2 for ws in sources)


def test_substitution_spec_has_one_substitutable_class():
    cfg = BenchmarkConfig(duration_s=30)
    spec = cfg.substitution_spec(0)
    assert all((p.amplitude_scale, p.bias, p.rotation_deg) == (1.0, 0.0, 0.0) for p in spec.perturbations)
    assert spec.shared_classes == (cfg.shared_class,)
    sources, _ = split_domains(spec, 0)
    report = similarity_from_windowsets(sources, 0.8, max_len=300, band=cfg.similarity_band)
    assert report.substitutable == [cfg.shared_class]
    assert report.activities[cfg.shared_class].mean > 0.95
    assert np.isfinite([a.mean for a in report.activities.values()]).all()
