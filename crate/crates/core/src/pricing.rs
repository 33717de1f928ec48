//! Community clearing price.
//!
//! The price for an hour is the demand/supply ratio times the mean of the last
//! three clearing prices, clamped between the feed-in tariff and the utility
//! price:
//!
//! ```text
//! p_t = max(fit, min(up_t, (R_t / O_t) * (p_{t-1} + p_{t-2} + p_{t-3}) / 3))
//! ```
//!
//! The ratio is evaluated exactly and rounded half-up once, at the end.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantity::{div_round_half_up, EnergyQuantity, UnitPrice};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PricingError {
    #[error("feed-in tariff {fit} exceeds utility price {utility}")]
    FitAboveUtility { fit: UnitPrice, utility: UnitPrice },
}

/// Aggregate demand (`requests`, R_t) and supply (`offers`, O_t) of one hour.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemandSupplySnapshot {
    pub requests: EnergyQuantity,
    pub offers: EnergyQuantity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceState {
    /// Most recent first.
    history: [UnitPrice; 3],
    fit: UnitPrice,
}

impl PriceState {
    /// All three history slots start at the first hour's utility price.
    pub fn new(fit: UnitPrice, initial_utility: UnitPrice) -> Result<Self, PricingError> {
        check_bounds(fit, initial_utility)?;
        Ok(Self {
            history: [initial_utility; 3],
            fit,
        })
    }

    pub fn with_history(fit: UnitPrice, history: [UnitPrice; 3]) -> Self {
        Self { history, fit }
    }

    pub fn fit(&self) -> UnitPrice {
        self.fit
    }

    pub fn history(&self) -> [UnitPrice; 3] {
        self.history
    }

    /// Last clearing price (the seed value before the first hour).
    pub fn previous(&self) -> UnitPrice {
        self.history[0]
    }

    /// Computes this hour's price and pushes it onto the history.
    pub fn clearing_price(
        &mut self,
        utility: UnitPrice,
        snapshot: DemandSupplySnapshot,
    ) -> Result<UnitPrice, PricingError> {
        let price = evaluate(self.fit, utility, self.history, snapshot)?;
        self.history = [price, self.history[0], self.history[1]];
        Ok(price)
    }
}

fn check_bounds(fit: UnitPrice, utility: UnitPrice) -> Result<(), PricingError> {
    if fit > utility {
        return Err(PricingError::FitAboveUtility { fit, utility });
    }
    Ok(())
}

/// Pure evaluation of the clearing price without touching any state.
///
/// With no offers the grid is the only supplier and the utility price applies.
pub fn evaluate(
    fit: UnitPrice,
    utility: UnitPrice,
    history: [UnitPrice; 3],
    snapshot: DemandSupplySnapshot,
) -> Result<UnitPrice, PricingError> {
    check_bounds(fit, utility)?;
    if snapshot.offers.is_zero() {
        return Ok(utility);
    }
    let history_sum: u128 = history.iter().map(|p| p.0 as u128).sum();
    let num = snapshot.requests.0 as u128 * history_sum;
    let den = 3 * snapshot.offers.0 as u128;
    let raw = div_round_half_up(num, den);
    let clamped = raw.min(utility.0 as u128).max(fit.0 as u128);
    Ok(UnitPrice(clamped as u64))
}
