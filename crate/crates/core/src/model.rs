//! Shared domain vocabulary: peers, timesteps and market intents.

use std::fmt;

use chrono::{Datelike, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::quantity::{EnergyQuantity, MoneyAmount, NetPosition, UnitPrice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PeerId(pub u32);

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prosumer,
    Consumer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerState {
    pub id: PeerId,
    pub balance: MoneyAmount,
    pub willing_to_donate: bool,
    pub role: Role,
}

impl PeerState {
    pub fn new(id: PeerId, role: Role) -> Self {
        Self {
            id,
            balance: MoneyAmount::ZERO,
            willing_to_donate: role == Role::Prosumer,
            role,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MonthKey {
    pub year: i32,
    pub month: u32,
}

impl MonthKey {
    pub fn of(ts: &NaiveDateTime) -> Self {
        Self {
            year: ts.year(),
            month: ts.month(),
        }
    }
}

impl fmt::Display for MonthKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeStep {
    pub index: u32,
    pub timestamp: NaiveDateTime,
}

impl TimeStep {
    pub fn month_key(&self) -> MonthKey {
        MonthKey::of(&self.timestamp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentKind {
    Offer,
    BuyRequest,
    DonationRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarketIntent {
    pub peer: PeerId,
    pub kind: IntentKind,
    pub quantity: EnergyQuantity,
    pub arrival_order: u32,
}

/// What a peer does when its balance covers only part of its need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffordabilityPolicy {
    /// Buy only when the whole need is affordable, otherwise ask for a donation.
    #[default]
    Exclusive,
    /// Buy the affordable part; the rest is left unmet (no donation request).
    PartialPurchase,
}

/// The intent a peer emits for one timestep, as `(kind, quantity)`.
///
/// Returns `None` for a balanced hour. `unit_price` is the reference price for
/// affordability; the engine passes the previous clearing price.
pub fn classify_intent(
    net: NetPosition,
    balance: MoneyAmount,
    unit_price: UnitPrice,
    policy: AffordabilityPolicy,
) -> Option<(IntentKind, EnergyQuantity)> {
    if let Some(surplus) = net.surplus() {
        return Some((IntentKind::Offer, surplus));
    }
    let need = net.need()?;
    if unit_price.cost(need) <= balance {
        return Some((IntentKind::BuyRequest, need));
    }
    match policy {
        AffordabilityPolicy::Exclusive => Some((IntentKind::DonationRequest, need)),
        AffordabilityPolicy::PartialPurchase => match unit_price.affordable(balance) {
            Some(q) if !q.is_zero() => Some((IntentKind::BuyRequest, q.min(need))),
            _ => Some((IntentKind::DonationRequest, need)),
        },
    }
}
