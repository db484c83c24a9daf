import logging

import numpy as np
import pytest

from hsps.dispersion import MaterialIndex, load_material
from hsps.errors import ConfigError, DomainError, NumericalDegeneracyError
from hsps.qpm import FUNDAMENTAL, spdc_spectrum
from hsps.thinfilm import (
    FilterStack,
    Layer,
    StackConstraints,
    Target,
    TransmissionSpectrum,
    convert_substrate,
    filtered_spectrum,
    fresnel_envelope,
    load_stack,
    optimize_stack,
    spectrum,
    stack_transmission,
    write_stack,
)

AIR = MaterialIndex("air", constant=1.0)
GLASS = MaterialIndex("glass", constant=1.5)
HIGH = MaterialIndex("H", constant=2.35)
LOW = MaterialIndex("L", constant=1.45)


def quarter_wave_mirror(pairs: int, reference_nm: float = 600.0) -> FilterStack:
    layers = []
    for _ in range(pairs):
        layers += [Layer(HIGH, reference_nm / (4 * 2.35)), Layer(LOW, reference_nm / (4 * 1.45))]
    layers.append(Layer(HIGH, reference_nm / (4 * 2.35)))
    return FilterStack(AIR, GLASS, layers, reference_nm)


def test_bare_interface():
    t, r = stack_transmission(FilterStack(AIR, GLASS), 600.0)
    assert t == pytest.approx(0.96, abs=1e-12)
    assert r == pytest.approx(0.04, abs=1e-12)
    assert fresnel_envelope(1.0, 1.5) == pytest.approx(0.96)


def test_quarter_wave_antireflection():
    coat = MaterialIndex("coat", constant=np.sqrt(1.5))
    stack = FilterStack(AIR, GLASS, [Layer(coat, 600.0 / (4 * np.sqrt(1.5)))])
    t, r = stack_transmission(stack, 600.0)
    assert t == pytest.approx(1.0, abs=1e-12)
    assert r == pytest.approx(0.0, abs=1e-12)


def test_quarter_wave_mirror_reflectance():
    admittance_ratio = (2.35 / 1.45) ** 16 * 2.35**2 / (1.0 * 1.5)
    expected = ((1 - admittance_ratio) / (1 + admittance_ratio)) ** 2
    _, r = stack_transmission(quarter_wave_mirror(8), 600.0)
    assert r == pytest.approx(expected, abs=1e-9)


def test_energy_conservation_on_random_stack():
    rng = np.random.default_rng(7)
    layers = [Layer(HIGH if k % 2 else LOW, d) for k, d in enumerate(rng.uniform(20, 400, size=23))]
    stack = FilterStack(AIR, GLASS, layers)
    t, r = stack_transmission(stack, np.linspace(400, 1700, 500))
    np.testing.assert_allclose(t + r, 1.0, atol=1e-12)
    assert np.all((t >= 0) & (t <= 1))


def test_reciprocity():
    rng = np.random.default_rng(11)
    layers = [Layer(HIGH if k % 2 else LOW, d) for k, d in enumerate(rng.uniform(20, 400, size=9))]
    stack = FilterStack(AIR, GLASS, layers)
    wavelengths = np.linspace(400, 1700, 200)
    forward, _ = stack_transmission(stack, wavelengths)
    backward, _ = stack_transmission(stack.reversed(), wavelengths)
    np.testing.assert_allclose(forward, backward, atol=1e-12)


def test_zero_thickness_layer_is_absent():
    stack = quarter_wave_mirror(3)
    padded = FilterStack(AIR, GLASS, stack.layers[:2] + [Layer(GLASS, 0.0)] + stack.layers[2:])
    wavelengths = np.linspace(400, 900, 101)
    np.testing.assert_allclose(stack_transmission(padded, wavelengths)[0], stack_transmission(stack, wavelengths)[0], atol=1e-12)


@pytest.mark.parametrize("thickness", [-1.0, 10_000.0])
def test_layer_thickness_bounds(thickness):
    with pytest.raises(ConfigError, match="outside"):
        Layer(HIGH, thickness)


def test_shipped_narrowband_design():
    stack = load_stack("narrowband_810.stack")
    assert len(stack.layers) == 23
    assert stack.layers[11].thickness_nm == pytest.approx(2 * stack.layers[9].thickness_nm)
    result = spectrum(stack, np.linspace(700, 900, 2001))
    assert result.peak_wavelength() == pytest.approx(810, abs=2)
    assert result.transmission.max() > 0.99
    assert np.interp(760, result.wavelengths_nm, result.transmission) < 0.2
    assert np.interp(860, result.wavelengths_nm, result.transmission) < 0.2


def test_shipped_narrowband_design_is_an_optimizer_fixed_point():
    stack = load_stack("narrowband_810.stack")
    result = optimize_stack([Target(810.0, 1.0)], StackConstraints(23, ("TiO2", "SiO2")), stack)
    assert result.stack is stack
    assert result.objective < 1e-12


def test_stack_file_round_trip(tmp_path):
    stack = load_stack("narrowband_810.stack")
    write_stack(stack, tmp_path / "copy.stack", "copy of the demo design")
    copy = load_stack(tmp_path / "copy.stack")
    assert [layer.material.name for layer in copy.layers] == [layer.material.name for layer in stack.layers]
    np.testing.assert_allclose(copy.thicknesses, stack.thicknesses, atol=1e-4)
    assert copy.reference_wavelength_nm == 810


def test_stack_file_errors(tmp_path):
    path = tmp_path / "bad.stack"
    path.write_text("# incident: air\n# exit: glass\nTiO2 1qw\n")
    with pytest.raises(ConfigError, match="reference_nm"):
        load_stack(path)
    path.write_text("# incident: air\nTiO2 100\n")
    with pytest.raises(ConfigError, match="missing"):
        load_stack(path)
    with pytest.raises(ConfigError, match="not found"):
        load_stack(tmp_path / "absent.stack")


def test_convert_substrate():
    wavelengths = np.linspace(500, 1000, 51)
    measured = spectrum(FilterStack(AIR, GLASS), wavelengths)
    converted = convert_substrate(measured, (AIR, GLASS), (GLASS, GLASS))
    np.testing.assert_allclose(converted.transmission, 1.0, atol=1e-12)
    np.testing.assert_allclose(converted.transmission + converted.reflection, 1.0)


def test_convert_substrate_round_trip():
    wavelengths = np.linspace(500, 1000, 51)
    measured = spectrum(quarter_wave_mirror(2), wavelengths)
    there = convert_substrate(measured, (AIR, GLASS), (AIR, load_material("LiNbO3")))
    back = convert_substrate(there, (AIR, load_material("LiNbO3")), (AIR, GLASS))
    np.testing.assert_allclose(back.transmission, measured.transmission, rtol=1e-12)


def test_convert_substrate_degenerate_envelope():
    measured = TransmissionSpectrum([600.0, 700.0], [0.5, 0.5], [0.5, 0.5])
    with pytest.raises(NumericalDegeneracyError, match="envelope"):
        convert_substrate(measured, (1.0, 1e7), (AIR, GLASS))


def test_antireflection_optimisation():
    coat = MaterialIndex("coat", constant=np.sqrt(1.5))
    seed = FilterStack(AIR, GLASS, [Layer(coat, 80.0)])
    result = optimize_stack([Target(600.0, 1.0)], StackConstraints(1, ("coat",)), seed)
    quarter, half = 600.0 / (4 * np.sqrt(1.5)), 600.0 / (2 * np.sqrt(1.5))
    offset = (result.stack.layers[0].thickness_nm - quarter) % half
    assert min(offset, half - offset) < 1.0
    assert result.objective < 1e-8


def test_seed_meeting_targets_is_returned():
    seed = quarter_wave_mirror(2)
    targets = [Target(wl, stack_transmission(seed, wl)[0]) for wl in (500.0, 600.0, 800.0)]
    result = optimize_stack(targets, StackConstraints(5, ("H", "L")), seed)
    assert result.objective < 1e-12
    assert result.stack is seed


def test_clipped_seed_starts_the_trace(caplog):
    coat = MaterialIndex("coat", constant=np.sqrt(1.5))
    quarter = 600.0 / (4 * np.sqrt(1.5))
    seed = FilterStack(AIR, GLASS, [Layer(coat, 3 * quarter + 2.0)])
    seed_objective = (1 - stack_transmission(seed, 600.0)[0]) ** 2
    with caplog.at_level(logging.WARNING):
        result = optimize_stack([Target(600.0, 1.0)], StackConstraints(1, ("coat",), 0.0, 100.0), seed)
    assert "clipped" in caplog.text
    assert result.stack.layers[0].thickness_nm <= 100.0
    assert result.stack.layers[0].thickness_nm == pytest.approx(100.0, abs=0.1)
    assert result.trace[0] > seed_objective
    assert result.trace[-1] == result.objective
    assert np.all(np.diff(result.trace) <= 0)


def test_filtered_spectrum(process, lithium_niobate):
    source = spdc_spectrum(process, lithium_niobate, [(FUNDAMENTAL, 1.0)], np.linspace(0.84, 0.87, 301))
    bare = filtered_spectrum(source, FilterStack(AIR, GLASS), path_efficiency=0.42)
    np.testing.assert_allclose(bare.intensities, source.intensities * 0.96 * 0.42, rtol=1e-12)
    np.testing.assert_array_equal(bare.wavelengths, source.wavelengths)

    blocked = filtered_spectrum(source, quarter_wave_mirror(8, reference_nm=855.0))
    assert blocked.intensities.max() < 0.01 * source.intensities.max()

    for efficiency in (0.0, 1.5):
        with pytest.raises(DomainError, match="path efficiency"):
            filtered_spectrum(source, FilterStack(AIR, GLASS), efficiency)


@pytest.mark.slow
def test_output_coating_targets_are_feasible():
    targets = [Target(532, 0.05, kind="max"), Target(810, 0.95, kind="min"), Target(1550, 0.95, kind="min")]
    seed = load_stack("output_coating_seed.stack")
    result = optimize_stack(
        targets, StackConstraints(40, ("TiO2", "SiO2"), 0.0, 600.0), seed, rng_seed=20241019, restarts=3
    )
    assert len(result.stack.layers) <= 40
    for target in targets:
        assert target.met(stack_transmission(result.stack, target.wavelength_nm)[0], tolerance=1e-4)
    assert np.all(np.diff(result.trace) <= 0)


@pytest.mark.parametrize(
    "targets, constraints, seed, message",
    [
        ([], StackConstraints(5, ("H", "L")), quarter_wave_mirror(2), "at least one target"),
        ([Target(600, 0.5)], StackConstraints(5, ("H", "L")), FilterStack(AIR, GLASS), "at least one layer"),
        ([Target(600, 0.5)], StackConstraints(3, ("H", "L")), quarter_wave_mirror(2), "max_layers"),
        ([Target(600, 0.5)], StackConstraints(5, ("H",)), quarter_wave_mirror(2), "not allowed"),
    ],
)
def test_optimizer_rejects_bad_input(targets, constraints, seed, message):
    with pytest.raises(ConfigError, match=message):
        optimize_stack(targets, constraints, seed)


def test_restarts_need_a_seed():
    with pytest.raises(ConfigError, match="rng seed"):
        optimize_stack([Target(600, 0.5)], StackConstraints(5, ("H", "L")), quarter_wave_mirror(2), restarts=2)


def test_target_validation():
    with pytest.raises(ConfigError, match="kind"):
        Target(600, 0.5, kind="between")
    with pytest.raises(ConfigError, match="outside"):
        Target(600, 1.5)
    assert Target(600, 0.05, kind="max").met(0.01)
    assert not Target(600, 0.95, kind="min").met(0.9)
