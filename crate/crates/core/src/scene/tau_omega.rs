//! Zeroth-order tau-omega emission model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, LAI, LST, SM, TB};

/// Soil moisture anchors of the affine reflectivity map.
const SM_DRY: f64 = 0.05;
const SM_WET: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauOmegaParams {
    /// Incidence angle, degrees.
    pub incidence_angle: f64,
    /// Downwelling sky brightness, kelvin.
    pub sky_temperature: f64,
    /// Rough-surface reflectivity at SM = 0.05.
    pub reflectivity_dry: f64,
    /// Rough-surface reflectivity at SM = 0.45.
    pub reflectivity_wet: f64,
    /// Optical depth per unit vegetation water content (m²/kg).
    pub vegetation_b_factor: f64,
    /// Vegetation water content per unit LAI (kg/m²).
    pub vwc_per_lai: f64,
    pub single_scattering_albedo: f64,
    /// Surface roughness record, cm. Not used by the reflectivity surrogate.
    pub rms_height: f64,
    /// Surface correlation length record, cm. Not used by the reflectivity surrogate.
    pub correlation_length: f64,
}

impl Default for TauOmegaParams {
    fn default() -> Self {
        Self {
            incidence_angle: 50.0,
            sky_temperature: 5.0,
            reflectivity_dry: 0.05,
            reflectivity_wet: 0.40,
            vegetation_b_factor: 0.12,
            vwc_per_lai: 0.5,
            single_scattering_albedo: 0.05,
            rms_height: 0.62,
            correlation_length: 8.72,
        }
    }
}

impl TauOmegaParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(msg));
        if !(0.0..90.0).contains(&self.incidence_angle) {
            return bad(format!("incidence angle {} outside [0, 90)", self.incidence_angle));
        }
        if !(self.sky_temperature >= 0.0) {
            return bad(format!("sky temperature {} < 0", self.sky_temperature));
        }
        for r in [self.reflectivity_dry, self.reflectivity_wet] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("reflectivity {r} outside [0, 1]"));
            }
        }
        if self.reflectivity_wet < self.reflectivity_dry {
            return bad("wet reflectivity must not be below dry reflectivity".into());
        }
        if !(0.0..1.0).contains(&self.single_scattering_albedo) {
            return bad(format!("albedo {} outside [0, 1)", self.single_scattering_albedo));
        }
        if !(self.vegetation_b_factor >= 0.0 && self.vwc_per_lai >= 0.0) {
            return bad("vegetation factors must be >= 0".into());
        }
        Ok(())
    }

    /// Soil reflectivity as an affine function of soil moisture, clamped to [0, 1].
    pub fn reflectivity(&self, sm: f64) -> f64 {
        let slope = (self.reflectivity_wet - self.reflectivity_dry) / (SM_WET - SM_DRY);
        (self.reflectivity_dry + slope * (sm - SM_DRY)).clamp(0.0, 1.0)
    }

    /// Canopy optical depth.
    pub fn optical_depth(&self, lai: f64) -> f64 {
        self.vegetation_b_factor * self.vwc_per_lai * lai.max(0.0)
    }
}

/// Brightness temperature of a canopy-covered soil with soil and canopy at `lst`.
pub fn tau_omega_forward(sm: f64, lst: f64, lai: f64, params: &TauOmegaParams) -> f64 {
    let r = params.reflectivity(sm);
    let cos_theta = params.incidence_angle.to_radians().cos();
    let gamma = (-params.optical_depth(lai) / cos_theta).exp();
    tb_from_transmissivity(r, gamma, lst, params)
}

pub(crate) fn tb_from_transmissivity(r: f64, gamma: f64, lst: f64, params: &TauOmegaParams) -> f64 {
    let omega = params.single_scattering_albedo;
    let soil = gamma * (1.0 - r) * lst;
    let canopy = (1.0 - omega) * (1.0 - gamma) * (1.0 + r * gamma) * lst;
    let sky = gamma * gamma * r * params.sky_temperature;
    soil + canopy + sky
}

/// Computes the TB layer from SM, LST and LAI, replacing any existing TB.
pub fn forward_model_grid(grid: &Grid, params: &TauOmegaParams) -> Result<Grid> {
    params.validate()?;
    let sm = grid.require(SM)?;
    let lst = grid.require(LST)?;
    let lai = grid.require(LAI)?;
    let tb = sm
        .iter()
        .zip(lst)
        .zip(lai)
        .map(|((&s, &t), &l)| tau_omega_forward(s, t, l, params))
        .collect();
    let mut out = grid.clone();
    out.set_layer(TB, tb)?;
    Ok(out)
}
