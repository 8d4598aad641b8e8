import pytest

from gradpath.archspec import (ArchSpec, CSPConfig, ElanStack, Family, SpecError, dumps, load,
                               loads)


def test_round_trip_all_fields():
    spec = ArchSpec(Family.RESNET, depth=(2, 3), base_channels=12, prn_mask_ratio=0.3,
                    csp=CSPConfig(0.25, "last", "conv"), elan_stack=ElanStack(3, 2),
                    stop_grad="on_identity", input_shape=(3, 64, 48), num_classes=10,
                    osa_layers=4, replan=True)
    text = dumps(spec)
    assert loads(text) == spec
    assert dumps(loads(text)) == text


def test_float_round_trip_is_exact():
    spec = ArchSpec(Family.PRN, prn_mask_ratio=0.1 + 0.2)
    assert loads(dumps(spec)).prn_mask_ratio == 0.1 + 0.2


def test_comments_and_blank_lines():
    spec = loads("# a ResNet\n\nfamily = ResNet  # trailing\ndepth = 3\n")
    assert spec.family is Family.RESNET and spec.depth == (3,) and spec.stages == 1


def test_single_depth_broadcasts_over_stages():
    assert ArchSpec(Family.PLAIN, depth=(2,), stages=3).depth == (2, 2, 2)


@pytest.mark.parametrize("text, line", [
    ("family = ResNet\nnonsense\n", 2),
    ("family = ResNet\ncolour = red\n", 2),
    ("family = ResNet\ndepth = x\n", 2),
    ("family = ResNet\ndepth = 2\ndepth = 3\n", 3),
    ("family = Transformer\n", 1),
    ("family = ResNet\ncsp.fusion = sideways\n", 2),
    ("family = ResNet\nprn_mask_ratio = 1.5\n", 2),
])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(SpecError) as info:
        loads(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")
    assert "\n" not in str(info.value)


def test_missing_family():
    with pytest.raises(SpecError, match="family"):
        loads("depth = 3\n")


def test_invalid_values_rejected_directly():
    with pytest.raises(SpecError):
        ArchSpec(Family.RESNET, depth=(0,))
    with pytest.raises(SpecError):
        ArchSpec(Family.RESNET, stop_grad="sometimes")
    with pytest.raises(SpecError):
        ArchSpec(Family.RESNET, csp=CSPConfig(1.0))


def test_load_file(tmp_path):
    p = tmp_path / "r.spec"
    p.write_text("family = DenseNet\ndepth = 4\n")
    assert load(p).family is Family.DENSENET
