//! Link-budget requirements for the analog and digital cancellation stages.
//!
//! Measured levels (`alpha_selftalk_db`, `alpha_crosstalk_db`, `delta_frame_db`)
//! are negative power ratios. The requirement formulas work with positive
//! suppression magnitudes; [`BudgetReport`] converts between the two by
//! negation.

use std::fmt;

use serde::Serialize;

use crate::params::{db_to_lin, lin_to_db, SystemParams};

/// Minimum analog suppression that keeps the strongest SI peak below the
/// LNA compression point: `P_T + dP_PAPR - P_1dB,R`.
pub fn alpha_min(p_t_dbm: f64, papr_margin_db: f64, p1db_rx_dbm: f64) -> f64 {
    p_t_dbm + papr_margin_db - p1db_rx_dbm
}

/// Digital suppression needed to bring the residual down to the noise
/// floor: `P_T + dP_PAPR - (P_NF + alpha)` with `alpha` a positive magnitude.
pub fn delta_max(p_t_dbm: f64, papr_margin_db: f64, p_nf_dbm: f64, alpha_db: f64) -> f64 {
    p_t_dbm + papr_margin_db - (p_nf_dbm + alpha_db)
}

/// Residual self-interference power after the passive isolation with
/// `P_T` split evenly over self-talk and cross-talk paths. Returns the power
/// in dBm and the total isolation as a (negative) ratio in dB.
pub fn residual_analog_power(p_t_dbm: f64, alpha_s_db: f64, alpha_c_db: f64) -> (f64, f64) {
    let ratio = 0.5 * db_to_lin(alpha_s_db) + 0.5 * db_to_lin(alpha_c_db);
    let alpha_db = lin_to_db(ratio);
    (p_t_dbm + alpha_db, alpha_db)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetReport {
    pub p_t_dbm: f64,
    pub alpha_min_db: f64,
    pub alpha_db: f64,
    pub delta_max_db: f64,
    pub p_residual_analog_dbm: f64,
    pub delta_db: f64,
    pub total_sic_db: f64,
}

impl BudgetReport {
    /// Budget at `p_t_dbm`, with an optional achieved digital level
    /// (negative dB, as measured).
    pub fn new(params: &SystemParams, p_t_dbm: f64, delta_frame_db: Option<f64>) -> Self {
        let (p_residual_analog_dbm, alpha_level) =
            residual_analog_power(p_t_dbm, params.alpha_selftalk_db, params.alpha_crosstalk_db);
        let alpha_db = -alpha_level;
        let delta_db = delta_frame_db.map_or(0.0, |d| -d);
        Self {
            p_t_dbm,
            alpha_min_db: alpha_min(p_t_dbm, params.papr_margin_db, params.p1db_rx_dbm),
            alpha_db,
            delta_max_db: delta_max(p_t_dbm, params.papr_margin_db, params.noise_floor_dbm, alpha_db),
            p_residual_analog_dbm,
            delta_db,
            total_sic_db: alpha_db + delta_db,
        }
    }

    pub const HEADER: &'static str =
        "  P_T[dBm]  alpha_min[dB]  alpha[dB]  delta_max[dB]  P_A[dBm]  delta[dB]  total[dB]";
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:>10.1}{:>15.2}{:>11.2}{:>15.2}{:>10.2}{:>11.2}{:>11.2}",
            self.p_t_dbm,
            self.alpha_min_db,
            self.alpha_db,
            self.delta_max_db,
            self.p_residual_analog_dbm,
            self.delta_db,
            self.total_sic_db
        )
    }
}

/// Fixed-width table of reports, one row per transmit power.
pub fn budget_table(reports: &[BudgetReport]) -> String {
    let mut out = String::from(BudgetReport::HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}
