import pytest

from netsim.trace import ModelProfile, ParamSpec, ProfileSpec, synthesize_profile

# Appendix-style inputs used across tests: a 200 MB model on 25 Gbps links.
RESNET200 = dict(m=1.6e9, b=25e9, c_f=0.16962, c_b=0.3838)
VGG16 = dict(m=6.58e9, b=25e9, c_f=0.17261, c_b=0.41587)


def vgg_like_spec(fwd=0.169, bp=0.193):
    first_bp = 0.169 / 0.193 if bp else 0.0
    return ProfileSpec(
        layer_count=22, total_size=6.58e9, fwd_total=fwd, bp_total=bp,
        first_bp_fraction=first_bp if bp else 0.0,
        last_layer_size_fraction=5.44 / 6.58,
    )


def inception_like_spec():
    return ProfileSpec(
        layer_count=21, total_size=0.715e9, fwd_total=0.176, bp_total=0.296,
        first_bp_fraction=0.2, last_layer_size_fraction=0.6,
    )


@pytest.fixture(scope="session")
def vgg_profile():
    return synthesize_profile(vgg_like_spec())


@pytest.fixture(scope="session")
def vgg_profile_zero_compute():
    return synthesize_profile(vgg_like_spec(fwd=0.0, bp=0.0))


@pytest.fixture(scope="session")
def inception_profile():
    return synthesize_profile(inception_like_spec())


@pytest.fixture
def single_param_profile():
    return ModelProfile(params=(ParamSpec("p0", size=1e9),))


def uniform_profile(n: int, total: float, bp_each: float = 0.0,
                    fp_each: float = 0.0) -> ModelProfile:
    return ModelProfile(params=tuple(
        ParamSpec(f"l{i}", size=total / n, bp_compute=bp_each,
                  fp_compute=fp_each)
        for i in range(n)))
