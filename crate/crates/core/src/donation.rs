//! Donation allocation over the post-trading residuals.
//!
//! Four strategies are provided:
//!
//! * `Ug2d`: the fund buys grid energy for donees at the utility price.
//! * `P2d`: the fund buys residual prosumer surplus at the clearing price.
//! * `P2pd`: willing prosumers give their residual surplus for free.
//! * `Hed`: per donee: fund-bought peer energy, then fund-bought grid
//!   energy, then free energy from willing prosumers.
//!
//! Donees are served in the arrival order of their donation requests, and
//! prosumers are drained in the arrival order of their offers. A fund purchase
//! of `q` Wh is capped at `floor(F_a / price)` and costs `round(q * price)`,
//! so the fund never goes negative.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::PeerId;
use crate::quantity::{EnergyQuantity, MoneyAmount, UnitPrice};
use crate::trading::MarketResidual;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DonationError {
    #[error("fund payment of {amount} exceeds available {available}")]
    InsufficientFunds {
        amount: MoneyAmount,
        available: MoneyAmount,
    },
    #[error("ledger replay yields {replayed}, ledger holds {recorded}")]
    ReplayMismatch {
        replayed: MoneyAmount,
        recorded: MoneyAmount,
    },
    #[error("unknown donation algorithm `{0}`")]
    UnknownAlgorithm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonationSource {
    GridFunded,
    PeerFunded,
    PeerDirect,
}

impl DonationSource {
    pub fn is_funded(self) -> bool {
        !matches!(self, DonationSource::PeerDirect)
    }
}

/// Who receives money for a donation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Payee {
    None,
    Grid,
    Peer(PeerId),
}

impl fmt::Display for Payee {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payee::None => Ok(()),
            Payee::Grid => f.write_str("grid"),
            Payee::Peer(id) => write!(f, "{id}"),
        }
    }
}

impl FromStr for Payee {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "" => Ok(Payee::None),
            "grid" => Ok(Payee::Grid),
            other => other
                .parse::<u32>()
                .map(|id| Payee::Peer(PeerId(id)))
                .map_err(|_| format!("invalid payee `{other}`")),
        }
    }
}

impl Serialize for Payee {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Payee {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One energy transfer to a donee.
///
/// `supplier` is the prosumer whose surplus was used (peer-funded and
/// peer-direct); grid-funded events have none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DonationEvent {
    pub timestep: u32,
    pub donee: PeerId,
    pub quantity_wh: EnergyQuantity,
    pub source: DonationSource,
    pub payee: Payee,
    pub payment_cents: MoneyAmount,
    #[serde(default, with = "optional_peer")]
    pub supplier: Option<PeerId>,
}

mod optional_peer {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<PeerId>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(id) => s.collect_str(id),
            None => s.serialize_str(""),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<PeerId>, D::Error> {
        let s = String::deserialize(d)?;
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<u32>().map(|id| Some(PeerId(id))).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FundEntryKind {
    Deposit,
    GridPayment,
    ProsumerPayment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FundEntry {
    pub timestep: u32,
    pub kind: FundEntryKind,
    pub amount_cents: MoneyAmount,
    /// `external` for deposits, `grid` or a peer id for payments.
    pub counterparty: Counterparty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Counterparty {
    External,
    Grid,
    Peer(PeerId),
}

impl fmt::Display for Counterparty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Counterparty::External => f.write_str("external"),
            Counterparty::Grid => f.write_str("grid"),
            Counterparty::Peer(id) => write!(f, "{id}"),
        }
    }
}

impl Serialize for Counterparty {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Counterparty {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        match s.as_str() {
            "external" => Ok(Counterparty::External),
            "grid" => Ok(Counterparty::Grid),
            other => other
                .parse::<u32>()
                .map(|id| Counterparty::Peer(PeerId(id)))
                .map_err(serde::de::Error::custom),
        }
    }
}

/// The external-donation fund (F_a) with its append-only history.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FundLedger {
    available: MoneyAmount,
    entries: Vec<FundEntry>,
}

impl FundLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_funds(timestep: u32, amount: MoneyAmount) -> Self {
        let mut ledger = Self::new();
        ledger.deposit(timestep, amount);
        ledger
    }

    pub fn available(&self) -> MoneyAmount {
        self.available
    }

    pub fn entries(&self) -> &[FundEntry] {
        &self.entries
    }

    pub fn deposit(&mut self, timestep: u32, amount: MoneyAmount) {
        self.available += amount;
        self.entries.push(FundEntry {
            timestep,
            kind: FundEntryKind::Deposit,
            amount_cents: amount,
            counterparty: Counterparty::External,
        });
    }

    fn pay(
        &mut self,
        timestep: u32,
        kind: FundEntryKind,
        amount: MoneyAmount,
        counterparty: Counterparty,
    ) -> Result<(), DonationError> {
        self.available = self
            .available
            .checked_sub(amount)
            .map_err(|_| DonationError::InsufficientFunds {
                amount,
                available: self.available,
            })?;
        self.entries.push(FundEntry {
            timestep,
            kind,
            amount_cents: amount,
            counterparty,
        });
        Ok(())
    }

    /// Recomputes F_a from the entry history, failing if it ever dips below zero.
    pub fn replay(entries: &[FundEntry]) -> Result<MoneyAmount, DonationError> {
        let mut fund = MoneyAmount::ZERO;
        for e in entries {
            fund = match e.kind {
                FundEntryKind::Deposit => fund + e.amount_cents,
                _ => fund.checked_sub(e.amount_cents).map_err(|_| DonationError::InsufficientFunds {
                    amount: e.amount_cents,
                    available: fund,
                })?,
            };
        }
        Ok(fund)
    }

    pub fn verify(&self) -> Result<(), DonationError> {
        let replayed = Self::replay(&self.entries)?;
        if replayed != self.available {
            return Err(DonationError::ReplayMismatch {
                replayed,
                recorded: self.available,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurplusSlot {
    pub peer: PeerId,
    pub quantity: EnergyQuantity,
    pub willing: bool,
}

/// Mutable working copy of the residual surplus and donee needs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DonationPools {
    pub surplus: Vec<SurplusSlot>,
    pub needs: Vec<(PeerId, EnergyQuantity)>,
}

impl DonationPools {
    pub fn from_residual(residual: &MarketResidual, willing: impl Fn(PeerId) -> bool) -> Self {
        Self {
            surplus: residual
                .surplus
                .iter()
                .map(|&(peer, quantity)| SurplusSlot {
                    peer,
                    quantity,
                    willing: willing(peer),
                })
                .collect(),
            needs: residual.donation_need.clone(),
        }
    }

    pub fn total_surplus(&self) -> EnergyQuantity {
        self.surplus.iter().map(|s| s.quantity).sum()
    }

    pub fn total_need(&self) -> EnergyQuantity {
        self.needs.iter().map(|(_, q)| *q).sum()
    }
}

/// Clearing and utility prices in force for a donation round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DonationPrices {
    pub timestep: u32,
    pub clearing: UnitPrice,
    pub utility: UnitPrice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DonationAlgorithm {
    Ug2d,
    P2d,
    P2pd,
    Hed,
}

impl DonationAlgorithm {
    pub const ALL: [DonationAlgorithm; 4] = [Self::Ug2d, Self::P2d, Self::P2pd, Self::Hed];

    pub fn label(self) -> &'static str {
        match self {
            Self::Ug2d => "UG2D",
            Self::P2d => "P2D",
            Self::P2pd => "P2PD",
            Self::Hed => "HED",
        }
    }

    pub fn uses_funds(self) -> bool {
        !matches!(self, Self::P2pd)
    }

    pub fn uses_direct_donations(self) -> bool {
        matches!(self, Self::P2pd | Self::Hed)
    }

    pub fn run(
        self,
        pools: &mut DonationPools,
        ledger: &mut FundLedger,
        prices: DonationPrices,
    ) -> Vec<DonationEvent> {
        match self {
            Self::Ug2d => run_ug2d(pools, ledger, prices),
            Self::P2d => run_p2d(pools, ledger, prices),
            Self::P2pd => run_p2pd(pools, prices.timestep),
            Self::Hed => run_hed(pools, ledger, prices),
        }
    }
}

impl fmt::Display for DonationAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DonationAlgorithm {
    type Err = DonationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ug2d" => Ok(Self::Ug2d),
            "p2d" => Ok(Self::P2d),
            "p2pd" => Ok(Self::P2pd),
            "hed" => Ok(Self::Hed),
            _ => Err(DonationError::UnknownAlgorithm(s.to_string())),
        }
    }
}

/// Fund-bought grid energy only.
pub fn run_ug2d(pools: &mut DonationPools, ledger: &mut FundLedger, prices: DonationPrices) -> Vec<DonationEvent> {
    serve_donees(pools, |donee, need, _surplus, events| {
        buy_from_grid(donee, need, ledger, prices, events);
    })
}

/// Fund-bought prosumer surplus only.
pub fn run_p2d(pools: &mut DonationPools, ledger: &mut FundLedger, prices: DonationPrices) -> Vec<DonationEvent> {
    serve_donees(pools, |donee, need, surplus, events| {
        buy_from_peers(donee, need, surplus, ledger, prices, events);
    })
}

/// Free energy from willing prosumers only; the fund is not touched.
pub fn run_p2pd(pools: &mut DonationPools, timestep: u32) -> Vec<DonationEvent> {
    serve_donees(pools, |donee, need, surplus, events| {
        give_from_peers(donee, need, surplus, timestep, events);
    })
}

/// Hybrid: peer purchase, then grid purchase, then free peer energy, per donee.
pub fn run_hed(pools: &mut DonationPools, ledger: &mut FundLedger, prices: DonationPrices) -> Vec<DonationEvent> {
    serve_donees(pools, |donee, need, surplus, events| {
        buy_from_peers(donee, need, surplus, ledger, prices, events);
        buy_from_grid(donee, need, ledger, prices, events);
        give_from_peers(donee, need, surplus, prices.timestep, events);
    })
}

fn serve_donees(
    pools: &mut DonationPools,
    mut serve: impl FnMut(PeerId, &mut u64, &mut [SurplusSlot], &mut Vec<DonationEvent>),
) -> Vec<DonationEvent> {
    let mut events = Vec::new();
    for (donee, need) in pools.needs.iter_mut() {
        let mut remaining = need.0;
        if remaining > 0 {
            serve(*donee, &mut remaining, &mut pools.surplus, &mut events);
        }
        *need = EnergyQuantity(remaining);
    }
    events
}

fn buy_from_peers(
    donee: PeerId,
    need: &mut u64,
    surplus: &mut [SurplusSlot],
    ledger: &mut FundLedger,
    prices: DonationPrices,
    events: &mut Vec<DonationEvent>,
) {
    // a zero clearing price would otherwise let an empty fund buy free energy
    if ledger.available().is_zero() {
        return;
    }
    let price = prices.clearing;
    for slot in surplus.iter_mut() {
        if *need == 0 {
            break;
        }
        if slot.quantity.is_zero() {
            continue;
        }
        let mut q = (*need).min(slot.quantity.0);
        if let Some(cap) = price.affordable(ledger.available()) {
            q = q.min(cap.0);
        }
        if q == 0 {
            // funds cannot cover a single Wh; they only shrink from here
            break;
        }
        let quantity = EnergyQuantity(q);
        let payment = price.cost(quantity);
        ledger
            .pay(prices.timestep, FundEntryKind::ProsumerPayment, payment, Counterparty::Peer(slot.peer))
            .expect("purchase bounded by available funds");
        slot.quantity = EnergyQuantity(slot.quantity.0 - q);
        *need -= q;
        events.push(DonationEvent {
            timestep: prices.timestep,
            donee,
            quantity_wh: quantity,
            source: DonationSource::PeerFunded,
            payee: Payee::Peer(slot.peer),
            payment_cents: payment,
            supplier: Some(slot.peer),
        });
    }
}

fn buy_from_grid(
    donee: PeerId,
    need: &mut u64,
    ledger: &mut FundLedger,
    prices: DonationPrices,
    events: &mut Vec<DonationEvent>,
) {
    if *need == 0 || ledger.available().is_zero() {
        return;
    }
    let price = prices.utility;
    let mut q = *need;
    if let Some(cap) = price.affordable(ledger.available()) {
        q = q.min(cap.0);
    }
    if q == 0 {
        return;
    }
    let quantity = EnergyQuantity(q);
    let payment = price.cost(quantity);
    ledger
        .pay(prices.timestep, FundEntryKind::GridPayment, payment, Counterparty::Grid)
        .expect("purchase bounded by available funds");
    *need -= q;
    events.push(DonationEvent {
        timestep: prices.timestep,
        donee,
        quantity_wh: quantity,
        source: DonationSource::GridFunded,
        payee: Payee::Grid,
        payment_cents: payment,
        supplier: None,
    });
}

fn give_from_peers(
    donee: PeerId,
    need: &mut u64,
    surplus: &mut [SurplusSlot],
    timestep: u32,
    events: &mut Vec<DonationEvent>,
) {
    for slot in surplus.iter_mut().filter(|s| s.willing) {
        if *need == 0 {
            break;
        }
        let q = (*need).min(slot.quantity.0);
        if q == 0 {
            continue;
        }
        slot.quantity = EnergyQuantity(slot.quantity.0 - q);
        *need -= q;
        events.push(DonationEvent {
            timestep,
            donee,
            quantity_wh: EnergyQuantity(q),
            source: DonationSource::PeerDirect,
            payee: Payee::None,
            payment_cents: MoneyAmount::ZERO,
            supplier: Some(slot.peer),
        });
    }
}

pub fn total_donated(events: &[DonationEvent]) -> EnergyQuantity {
    events.iter().map(|e| e.quantity_wh).sum()
}
