import numpy as np
import pytest

from hsps.dispersion import MaterialIndex, SellmeierModel, group_index, load_material, refractive_index
from hsps.errors import ConfigError, RangeError


@pytest.mark.parametrize(
    "wavelength, expected",
    [(0.532, 2.23423718), (0.81, 2.17470807), (1.55, 2.13788013)],
)
def test_lithium_niobate_index(lithium_niobate, wavelength, expected):
    assert refractive_index(lithium_niobate, wavelength, 25.0) == pytest.approx(expected, rel=1e-8)


def test_index_grows_with_temperature(lithium_niobate):
    wavelengths = np.array([0.532, 0.81, 1.55])
    difference = refractive_index(lithium_niobate, wavelengths, 80.0) - refractive_index(lithium_niobate, wavelengths, 25.0)
    assert np.all(difference > 0)
    assert difference[0] == pytest.approx(3.288e-3, rel=1e-3)


def test_normal_dispersion(lithium_niobate):
    wavelengths = np.linspace(0.45, 3.5, 200)
    assert np.all(np.diff(refractive_index(lithium_niobate, wavelengths, 25.0)) < 0)


@pytest.mark.parametrize("temperature", [25.0, 80.0, 100.0])
def test_index_decreases_across_visible_and_telecom(lithium_niobate, temperature):
    wavelengths = np.linspace(0.5, 1.6, 50)
    assert np.all(np.diff(refractive_index(lithium_niobate, wavelengths, temperature)) < 0)


@pytest.mark.parametrize("wavelength, expected", [(0.81, 2.26177304), (1.55, 2.18242617)])
def test_group_index(lithium_niobate, wavelength, expected):
    assert group_index(lithium_niobate, wavelength, 25.0) == pytest.approx(expected, rel=1e-6)


@pytest.mark.parametrize("temperature", [25.0, 80.0, 150.0])
def test_group_index_matches_analytic_derivative(lithium_niobate, temperature):
    wavelengths = np.linspace(0.5, 3.0, 50)
    analytic = refractive_index(lithium_niobate, wavelengths, temperature) - wavelengths * lithium_niobate.dn_dwavelength(
        wavelengths, temperature
    )
    np.testing.assert_allclose(group_index(lithium_niobate, wavelengths, temperature), analytic, rtol=1e-6)


def test_group_index_exceeds_phase_index(lithium_niobate):
    wavelengths = np.linspace(0.5, 2.0, 30)
    assert np.all(group_index(lithium_niobate, wavelengths, 25.0) > refractive_index(lithium_niobate, wavelengths, 25.0))


@pytest.mark.parametrize("wavelength, temperature", [(0.3, 25.0), (6.0, 25.0), (0.81, -100.0), (0.81, 500.0)])
def test_out_of_range_raises(lithium_niobate, wavelength, temperature):
    with pytest.raises(RangeError, match="bound"):
        refractive_index(lithium_niobate, wavelength, temperature)


def test_group_index_needs_margin_at_range_edge(lithium_niobate):
    lo, _ = lithium_niobate.valid_wavelength_range
    refractive_index(lithium_niobate, lo, 25.0)
    with pytest.raises(RangeError, match="margin"):
        group_index(lithium_niobate, lo, 25.0)


def test_scalar_and_array_inputs(lithium_niobate):
    assert isinstance(refractive_index(lithium_niobate, 0.81, 25.0), float)
    assert refractive_index(lithium_niobate, np.array([0.81, 1.55]), 25.0).shape == (2,)


def test_constant_model():
    model = SellmeierModel.constant(1.5)
    assert refractive_index(model, 0.81, 25.0) == pytest.approx(1.5)
    assert group_index(model, 0.81, 25.0) == pytest.approx(1.5)


def test_missing_coefficient():
    with pytest.raises(ConfigError, match="missing coefficients"):
        SellmeierModel({"a1": 4.0}, (0.4, 5.0), (0.0, 200.0))


def test_missing_sellmeier_file():
    with pytest.raises(ConfigError, match="not found"):
        SellmeierModel.from_file("no_such_crystal.txt")


def test_shipped_materials():
    assert load_material("air").index(0.81) == pytest.approx(1.0)
    assert load_material("TiO2").index(0.80) == pytest.approx(2.264, abs=1e-6)
    assert load_material("SiO2").index(0.80) == pytest.approx(1.4533, abs=1e-6)
    assert load_material("LiNbO3").index(0.81) > 2.1


def test_material_table_range():
    material = MaterialIndex("table", table=([0.5, 1.0], [1.6, 1.5]))
    assert material.index(0.75) == pytest.approx(1.55, abs=0.01)
    with pytest.raises(RangeError, match="table range"):
        material.index(1.2)


def test_material_needs_one_definition():
    with pytest.raises(ConfigError, match="exactly one"):
        MaterialIndex("both", constant=1.5, table=([0.5, 1.0], [1.6, 1.5]))
    with pytest.raises(ConfigError, match="Unknown material"):
        load_material("unobtainium")
