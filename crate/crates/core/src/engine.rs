//! Scenario runs: the hourly loop, its append-only logs, and matrix sweeps.
//!
//! Each hour runs, in order: month-start credits and fund deposit, intent
//! collection against the previous clearing price, pricing, budgeted FCFS
//! matching and settlement, donation over the post-trade residuals, fund
//! payouts to prosumers, token minting, and governance (scripted votes and
//! proposal resolution). Money and energy are reconciled after every hour.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::donation::{
    DonationAlgorithm, DonationEvent, DonationPools, DonationPrices, DonationSource, FundEntry, FundLedger, Payee,
};
use crate::governance::{Account, Governance, ProposalStatus, Vote, VoteDirection};
use crate::ingestion::{
    build_balance_schedule, build_donation_schedule, generate_synthetic, read_readings_file, ColumnMapping,
    IngestError, ReadingSeries, SyntheticConfig, UtilityPrices, TIMESTAMP_FORMAT,
};
use crate::metrics::{self, DonationReport, ParticipationStats};
use crate::model::{classify_intent, AffordabilityPolicy, IntentKind, MarketIntent, PeerId, PeerState, Role};
use crate::pricing::{DemandSupplySnapshot, PriceState};
use crate::quantity::{div_round_half_up, net_position, EnergyQuantity, Fraction, MoneyAmount, UnitPrice};
use crate::trading::{match_fcfs_budgeted, settle, Trade};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    ConfigFile { path: String, message: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("invariant `{invariant}` violated at timestep {timestep}: {detail}")]
    Invariant {
        timestep: u32,
        invariant: &'static str,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl EngineError {
    /// 1 for bad input, 2 for a breached runtime invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Invariant { .. } => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `utility_price_cents_per_kwh`: a constant or a path to an hourly CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriceSource {
    Constant(u64),
    Series(PathBuf),
}

/// A vote cast by the scenario script at a given hour, on the proposal that
/// concerns `subject`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedVote {
    pub timestep: u32,
    pub voter: Account,
    pub subject: PeerId,
    pub direction: VoteDirection,
    pub burn: u64,
}

fn yes() -> bool {
    true
}
fn one() -> u64 {
    1
}
fn default_window() -> u32 {
    24
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub id: String,
    pub balance_percentage: Fraction,
    pub utility_price_cents_per_kwh: PriceSource,
    pub fit_cents_per_kwh: u64,
    pub donation_algorithm: DonationAlgorithm,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readings_path: Option<PathBuf>,
    #[serde(default)]
    pub column_mapping: ColumnMapping,
    #[serde(default = "yes")]
    pub balance_carryover: bool,
    #[serde(default = "yes")]
    pub auto_approve_eligibility: bool,
    #[serde(default = "one")]
    pub mint_tokens_per_kwh: u64,
    /// Share of prosumers willing to give surplus away; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor_fraction: Option<Fraction>,
    #[serde(default)]
    pub willing_overrides: BTreeMap<u32, bool>,
    #[serde(default)]
    pub affordability: AffordabilityPolicy,
    #[serde(default)]
    pub quorum: u64,
    #[serde(default = "default_window")]
    pub voting_window: u32,
    #[serde(default)]
    pub governance_votes: Vec<ScriptedVote>,
    /// Relative paths resolve against this directory (the config file's).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ScenarioConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, EngineError> {
        let mut c: ScenarioConfig = serde_json::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_json(&text, &base).map_err(|e| EngineError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Checks that do not need the input data.
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return bad(format!("scenario id `{}` must be non-empty and use only [A-Za-z0-9._-]", self.id));
        }
        if self.balance_percentage.is_zero() {
            return bad("balance_percentage must be greater than zero".into());
        }
        match (&self.synthetic, &self.readings_path) {
            (Some(s), None) => s.validate()?,
            (None, Some(_)) => {}
            _ => return bad("exactly one of `synthetic` and `readings_path` is required".into()),
        }
        if let PriceSource::Constant(up) = self.utility_price_cents_per_kwh {
            self.check_prices(&UtilityPrices::Constant(UnitPrice(up)))?;
        }
        if let Some(f) = self.donor_fraction {
            if f.numer() > f.denom() {
                return bad("donor_fraction must be within [0, 1]".into());
            }
        }
        Ok(())
    }

    fn check_prices(&self, prices: &UtilityPrices) -> Result<(), EngineError> {
        let min = prices.min().unwrap_or(UnitPrice(0));
        if min.0 == 0 {
            return Err(EngineError::Config("utility price must be positive".into()));
        }
        if self.fit_cents_per_kwh > min.0 {
            return Err(EngineError::Config(format!(
                "fit_cents_per_kwh {} exceeds the minimum utility price {}",
                self.fit_cents_per_kwh, min.0
            )));
        }
        Ok(())
    }

    /// Identity of the readings input; scenarios in one matrix must agree.
    fn readings_key(&self) -> (Option<SyntheticConfig>, Option<PathBuf>, ColumnMapping, u64) {
        let seed = match &self.synthetic {
            Some(s) => s.seed.unwrap_or(self.seed),
            None => 0,
        };
        (
            self.synthetic.clone(),
            self.readings_path.as_deref().map(|p| self.resolve(p)),
            self.column_mapping.clone(),
            seed,
        )
    }

    pub fn load_readings(&self) -> Result<ReadingSeries, EngineError> {
        self.validate()?;
        match (&self.synthetic, &self.readings_path) {
            (Some(s), _) => Ok(generate_synthetic(s, self.seed)?),
            (None, Some(p)) => Ok(read_readings_file(&self.resolve(p), &self.column_mapping)?),
            (None, None) => unreachable!("validated"),
        }
    }

    pub fn load_prices(&self, readings: &ReadingSeries) -> Result<UtilityPrices, EngineError> {
        let prices = match &self.utility_price_cents_per_kwh {
            PriceSource::Constant(p) => UtilityPrices::Constant(UnitPrice(*p)),
            PriceSource::Series(path) => {
                let path = self.resolve(path);
                let file = fs::File::open(&path).map_err(io_err(&path))?;
                UtilityPrices::parse_series(file, readings.timestamps())?
            }
        };
        self.check_prices(&prices)?;
        Ok(prices)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreditKind {
    Credit,
    /// Unspent balance dropped at a month start when balances do not carry over.
    Forfeit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditEntry {
    pub timestep: u32,
    pub peer: PeerId,
    pub kind: CreditKind,
    pub amount_cents: MoneyAmount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceRecord {
    pub timestep: u32,
    pub timestamp: String,
    pub utility_price_cents: UnitPrice,
    pub clearing_price_cents: UnitPrice,
    pub requests_wh: EnergyQuantity,
    pub offers_wh: EnergyQuantity,
    pub donation_need_wh: EnergyQuantity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedVote {
    pub vote: ScriptedVote,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub timesteps: usize,
    pub peers: usize,
    pub prosumers: usize,
    pub traded_wh: EnergyQuantity,
    pub trade_payments_cents: MoneyAmount,
    pub unmet_buy_wh: EnergyQuantity,
    pub donation_requested_wh: EnergyQuantity,
    /// Need of donees that governance has not (yet) approved.
    pub ineligible_need_wh: EnergyQuantity,
    pub credits_cents: MoneyAmount,
    pub forfeited_cents: MoneyAmount,
    pub grid_payments_cents: MoneyAmount,
    pub fund_remaining_cents: MoneyAmount,
    pub peer_balances_cents: MoneyAmount,
    pub token_supply: u64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub scenario_id: String,
    pub algorithm: DonationAlgorithm,
    pub balance_percentage: Fraction,
    pub seed: u64,
    pub trades: Vec<Trade>,
    pub donations: Vec<DonationEvent>,
    pub fund: FundLedger,
    pub credits: Vec<CreditEntry>,
    pub prices: Vec<PriceRecord>,
    pub governance: Governance,
    pub peers: Vec<PeerState>,
    pub report: DonationReport,
    pub participation: ParticipationStats,
    pub rejected_votes: Vec<RejectedVote>,
    pub summary: RunSummary,
}

fn breach(timestep: u32, invariant: &'static str, detail: String) -> EngineError {
    EngineError::Invariant {
        timestep,
        invariant,
        detail,
    }
}

/// Which prosumers give away residual surplus for free.
fn willingness(config: &ScenarioConfig, readings: &ReadingSeries) -> Result<BTreeMap<PeerId, bool>, EngineError> {
    let roles: Vec<(PeerId, Role)> = (0..readings.peers().len())
        .map(|i| (readings.peers()[i], readings.role(i)))
        .collect();
    let mut willing: BTreeMap<PeerId, bool> = roles.iter().map(|&(p, r)| (p, r == Role::Prosumer)).collect();
    if let Some(f) = config.donor_fraction {
        let mut prosumers: Vec<PeerId> = roles.iter().filter(|(_, r)| *r == Role::Prosumer).map(|(p, _)| *p).collect();
        let keep = div_round_half_up(prosumers.len() as u128 * f.numer() as u128, f.denom() as u128) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        prosumers.shuffle(&mut rng);
        for (i, p) in prosumers.iter().enumerate() {
            willing.insert(*p, i < keep);
        }
    }
    for (&id, &w) in &config.willing_overrides {
        match willing.get_mut(&PeerId(id)) {
            Some(slot) => *slot = w,
            None => return Err(EngineError::Config(format!("willing_overrides names unknown peer {id}"))),
        }
    }
    Ok(willing)
}

/// Loads inputs and runs one scenario.
pub fn run(config: &ScenarioConfig) -> Result<RunArtifacts, EngineError> {
    let readings = config.load_readings()?;
    run_with_readings(config, &readings)
}

/// Runs one scenario over already-loaded readings.
pub fn run_with_readings(config: &ScenarioConfig, readings: &ReadingSeries) -> Result<RunArtifacts, EngineError> {
    config.validate()?;
    if readings.is_empty() {
        return Err(IngestError::Empty.into());
    }
    let prices = config.load_prices(readings)?;
    let willing = willingness(config, readings)?;

    let n = readings.peers().len();
    let fit = UnitPrice(config.fit_cents_per_kwh);
    let balances = build_balance_schedule(readings, &prices, config.balance_percentage);
    let deposits = build_donation_schedule(&balances).expect("readings are non-empty");

    let mut peers: BTreeMap<PeerId, PeerState> = BTreeMap::new();
    for (i, &id) in readings.peers().iter().enumerate() {
        let mut state = PeerState::new(id, readings.role(i));
        state.willing_to_donate = willing[&id];
        peers.insert(id, state);
    }
    let mut price_state =
        PriceState::new(fit, prices.at(0)).map_err(|e| EngineError::Config(e.to_string()))?;
    let mut ledger = FundLedger::new();
    let mut gov = Governance::new();
    let mut trades = Vec::new();
    let mut donations: Vec<DonationEvent> = Vec::new();
    let mut credits = Vec::new();
    let mut price_log = Vec::with_capacity(readings.len());
    let mut rejected_votes = Vec::new();
    let mut summary = RunSummary {
        timesteps: readings.len(),
        peers: n,
        prosumers: peers.values().filter(|p| p.role == Role::Prosumer).count(),
        ..RunSummary::default()
    };

    let mut votes_by_step: BTreeMap<u32, Vec<&ScriptedVote>> = BTreeMap::new();
    for v in &config.governance_votes {
        votes_by_step.entry(v.timestep).or_default().push(v);
    }
    let mut deposited = MoneyAmount::ZERO;

    for step in readings.steps() {
        let t = step.index;
        let ti = t as usize;
        let up = prices.at(ti);

        // month start
        if let Some(month) = balances.credit_at(ti) {
            if !config.balance_carryover {
                for p in peers.values_mut() {
                    if !p.balance.is_zero() {
                        credits.push(CreditEntry {
                            timestep: t,
                            peer: p.id,
                            kind: CreditKind::Forfeit,
                            amount_cents: p.balance,
                        });
                        summary.forfeited_cents += p.balance;
                        p.balance = MoneyAmount::ZERO;
                    }
                }
            }
            for (&id, &credit) in &month.credits {
                if credit.is_zero() {
                    continue;
                }
                peers.get_mut(&id).expect("known peer").balance += credit;
                summary.credits_cents += credit;
                credits.push(CreditEntry {
                    timestep: t,
                    peer: id,
                    kind: CreditKind::Credit,
                    amount_cents: credit,
                });
            }
        }
        if let Some(d) = deposits.deposit_at(ti).filter(|d| !d.is_zero()) {
            ledger.deposit(t, d);
            deposited += d;
        }

        // intents, in a seeded arrival order, priced at the previous clearing price
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(t as u64);
        order.shuffle(&mut rng);
        let reference = price_state.previous();
        let mut offers = Vec::new();
        let mut requests = Vec::new();
        let mut donation_requests = Vec::new();
        for (arrival, &pi) in order.iter().enumerate() {
            let id = readings.peers()[pi];
            let r = readings.reading(pi, ti);
            let net = net_position(r.production, r.consumption);
            let Some((kind, quantity)) = classify_intent(net, peers[&id].balance, reference, config.affordability)
            else {
                continue;
            };
            let intent = MarketIntent {
                peer: id,
                kind,
                quantity,
                arrival_order: arrival as u32,
            };
            match kind {
                IntentKind::Offer => offers.push(intent),
                IntentKind::BuyRequest => requests.push(intent),
                IntentKind::DonationRequest => donation_requests.push(intent),
            }
        }

        let snapshot = DemandSupplySnapshot {
            requests: requests.iter().map(|i| i.quantity).sum(),
            offers: offers.iter().map(|i| i.quantity).sum(),
        };
        let price = price_state
            .clearing_price(up, snapshot)
            .map_err(|e| breach(t, "fit <= utility price", e.to_string()))?;
        if price < fit || price > up {
            return Err(breach(t, "fit <= clearing price <= utility price", format!("{fit} / {price} / {up}")));
        }

        // trading
        let (step_trades, mut residual) =
            match_fcfs_budgeted(t, &offers, &requests, price, |peer| Some(peers[&peer].balance));
        settle(&step_trades, &mut peers).map_err(|e| breach(t, "buyer balance covers payments", e.to_string()))?;
        let traded: EnergyQuantity = step_trades.iter().map(|tr| tr.quantity_wh).sum();
        if traded.0 > snapshot.offers.0.min(snapshot.requests.0) {
            return Err(breach(t, "traded <= min(offers, requests)", format!("{traded} traded")));
        }
        summary.traded_wh += traded;
        summary.trade_payments_cents += step_trades.iter().map(|tr| tr.payment_cents).sum();
        summary.unmet_buy_wh += residual.total_unmet_buy();

        // eligibility
        for req in &donation_requests {
            summary.donation_requested_wh += req.quantity;
            if config.auto_approve_eligibility || gov.is_approved(req.peer) {
                residual.donation_need.push((req.peer, req.quantity));
            } else {
                summary.ineligible_need_wh += req.quantity;
                if !gov.has_proposal_for(req.peer) {
                    gov.open_proposal(req.peer, t, t.saturating_add(config.voting_window), config.quorum);
                }
            }
        }

        // donation over the residuals
        let mut pools = DonationPools::from_residual(&residual, |p| peers[&p].willing_to_donate);
        let surplus_before = pools.total_surplus();
        let need_before = pools.total_need();
        let fund_before = ledger.available();
        let events = config.donation_algorithm.run(
            &mut pools,
            &mut ledger,
            DonationPrices {
                timestep: t,
                clearing: price,
                utility: up,
            },
        );
        let donated: EnergyQuantity = events.iter().map(|e| e.quantity_wh).sum();
        let from_peers: EnergyQuantity = events
            .iter()
            .filter(|e| e.source != DonationSource::GridFunded)
            .map(|e| e.quantity_wh)
            .sum();
        let paid: MoneyAmount = events.iter().map(|e| e.payment_cents).sum();
        if need_before.0 - pools.total_need().0 != donated.0 {
            return Err(breach(t, "donee need reduced by donated energy", format!("{donated} donated")));
        }
        if surplus_before.0 - pools.total_surplus().0 != from_peers.0 {
            return Err(breach(t, "surplus reduced by peer-sourced donations", format!("{from_peers} from peers")));
        }
        if fund_before.0 - ledger.available().0 != paid.0 {
            return Err(breach(t, "fund reduced by donation payments", format!("{paid} paid")));
        }

        // fund payouts and minting
        for e in events {
            match e.payee {
                Payee::Peer(id) => {
                    let p = peers
                        .get_mut(&id)
                        .ok_or_else(|| breach(t, "payee is a known peer", id.to_string()))?;
                    p.balance += e.payment_cents;
                }
                Payee::Grid => summary.grid_payments_cents += e.payment_cents,
                Payee::None => {}
            }
            gov.mint_on_donation(&e, donations.len(), config.mint_tokens_per_kwh);
            donations.push(e);
        }

        // governance
        for v in votes_by_step.get(&t).into_iter().flatten() {
            let target = gov
                .proposals()
                .iter()
                .rev()
                .find(|p| p.subject == v.subject && p.status == ProposalStatus::Open)
                .map(|p| p.id);
            let outcome = match target {
                None => Err(format!("no open proposal for peer {}", v.subject)),
                Some(proposal) => gov
                    .cast_vote(
                        &Vote {
                            voter: v.voter,
                            proposal,
                            direction: v.direction,
                            burn_amount: v.burn,
                        },
                        t,
                    )
                    .map_err(|e| e.to_string()),
            };
            if let Err(reason) = outcome {
                rejected_votes.push(RejectedVote {
                    vote: (*v).clone(),
                    reason,
                });
            }
        }
        gov.resolve_due(t);
        gov.tokens()
            .check_supply()
            .map_err(|e| breach(t, "token supply equals sum of balances", e.to_string()))?;

        // money reconciliation
        let held: u64 = peers.values().map(|p| p.balance.0).sum::<u64>() + ledger.available().0;
        let expected = summary.credits_cents.0 + deposited.0 - summary.forfeited_cents.0 - summary.grid_payments_cents.0;
        if held != expected {
            return Err(breach(
                t,
                "balances + fund = credits + deposits - forfeits - grid payments",
                format!("held {held}, expected {expected}"),
            ));
        }

        price_log.push(PriceRecord {
            timestep: t,
            timestamp: step.timestamp.format(TIMESTAMP_FORMAT).to_string(),
            utility_price_cents: up,
            clearing_price_cents: price,
            requests_wh: snapshot.requests,
            offers_wh: snapshot.offers,
            donation_need_wh: need_before,
        });
        trades.extend(step_trades);
    }

    ledger
        .verify()
        .map_err(|e| breach(readings.len() as u32, "fund ledger replays to its balance", e.to_string()))?;

    let clearing: Vec<UnitPrice> = price_log.iter().map(|p| p.clearing_price_cents).collect();
    let report = metrics::aggregate(&donations, ledger.entries(), &clearing);
    let participation = metrics::participation(&donations, readings.peers());
    summary.fund_remaining_cents = ledger.available();
    summary.peer_balances_cents = peers.values().map(|p| p.balance).sum();
    summary.token_supply = gov.tokens().total_supply();

    Ok(RunArtifacts {
        scenario_id: config.id.clone(),
        algorithm: config.donation_algorithm,
        balance_percentage: config.balance_percentage,
        seed: config.seed,
        trades,
        donations,
        fund: ledger,
        credits,
        prices: price_log,
        governance: gov,
        peers: peers.into_values().collect(),
        report,
        participation,
        rejected_votes,
        summary,
    })
}

pub const TRADES_HEADER: [&str; 6] = ["timestep", "seller", "buyer", "quantity_wh", "unit_price_cents", "payment_cents"];
pub const DONATIONS_HEADER: [&str; 7] =
    ["timestep", "donee", "quantity_wh", "source", "payee", "payment_cents", "supplier"];
pub const FUND_HEADER: [&str; 4] = ["timestep", "kind", "amount_cents", "counterparty"];
pub const CREDITS_HEADER: [&str; 4] = ["timestep", "peer", "kind", "amount_cents"];
pub const PRICES_HEADER: [&str; 7] = [
    "timestep",
    "timestamp",
    "utility_price_cents",
    "clearing_price_cents",
    "requests_wh",
    "offers_wh",
    "donation_need_wh",
];
pub const BALANCES_HEADER: [&str; 4] = ["peer", "role", "willing_to_donate", "balance_cents"];

fn csv_bytes<T: Serialize>(header: &[&str], rows: &[T]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    w.into_inner().expect("flush")
}

#[derive(Serialize)]
struct BalanceRow {
    peer: PeerId,
    role: Role,
    willing_to_donate: bool,
    balance_cents: MoneyAmount,
}

/// The `report.json` document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportDocument {
    pub scenario: String,
    pub algorithm: DonationAlgorithm,
    pub balance_percentage: Fraction,
    pub seed: u64,
    pub report: serde_json::Value,
    pub participation: serde_json::Value,
    pub summary: serde_json::Value,
    pub rejected_votes: serde_json::Value,
}

impl RunArtifacts {
    pub fn report_document(&self) -> ReportDocument {
        ReportDocument {
            scenario: self.scenario_id.clone(),
            algorithm: self.algorithm,
            balance_percentage: self.balance_percentage,
            seed: self.seed,
            report: serde_json::to_value(&self.report).expect("serializable"),
            participation: serde_json::to_value(self.participation).expect("serializable"),
            summary: serde_json::to_value(&self.summary).expect("serializable"),
            rejected_votes: serde_json::to_value(&self.rejected_votes).expect("serializable"),
        }
    }

    pub fn report_text(&self) -> String {
        format!(
            "scenario {} ({}, balance percentage {}%)\n{}",
            self.scenario_id,
            self.algorithm,
            self.balance_percentage.percent_label(),
            metrics::report_text(&self.report, &self.participation)
        )
    }

    /// Every artifact file as `(name, bytes)`, in a fixed order.
    pub fn files(&self) -> Vec<(&'static str, Vec<u8>)> {
        let balances: Vec<BalanceRow> = self
            .peers
            .iter()
            .map(|p| BalanceRow {
                peer: p.id,
                role: p.role,
                willing_to_donate: p.willing_to_donate,
                balance_cents: p.balance,
            })
            .collect();
        let mut report = serde_json::to_vec_pretty(&self.report_document()).expect("serializable");
        report.push(b'\n');
        let mut tokens = self.governance.state_json().into_bytes();
        tokens.push(b'\n');
        vec![
            ("trades.csv", csv_bytes(&TRADES_HEADER, &self.trades)),
            ("donations.csv", csv_bytes(&DONATIONS_HEADER, &self.donations)),
            ("fund_ledger.csv", csv_bytes(&FUND_HEADER, self.fund.entries())),
            ("credits.csv", csv_bytes(&CREDITS_HEADER, &self.credits)),
            ("prices.csv", csv_bytes(&PRICES_HEADER, &self.prices)),
            ("balances.csv", csv_bytes(&BALANCES_HEADER, &balances)),
            ("governance.jsonl", self.governance.log_jsonl().into_bytes()),
            ("tokens.json", tokens),
            ("report.json", report),
            ("report.txt", self.report_text().into_bytes()),
        ]
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), EngineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, bytes) in self.files() {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EngineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| EngineError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

/// Logs of a finished run read back from its output directory.
#[derive(Debug, Clone)]
pub struct RunLogs {
    pub trades: Vec<Trade>,
    pub donations: Vec<DonationEvent>,
    pub fund: Vec<FundEntry>,
    pub credits: Vec<CreditEntry>,
    pub prices: Vec<PriceRecord>,
    pub roster: Vec<PeerId>,
    pub final_balances: BTreeMap<PeerId, MoneyAmount>,
}

#[derive(Deserialize)]
struct BalanceIn {
    peer: PeerId,
    balance_cents: MoneyAmount,
}

impl RunLogs {
    pub fn load(dir: &Path) -> Result<Self, EngineError> {
        let balances: Vec<BalanceIn> = read_csv(&dir.join("balances.csv"))?;
        Ok(Self {
            trades: read_csv(&dir.join("trades.csv"))?,
            donations: read_csv(&dir.join("donations.csv"))?,
            fund: read_csv(&dir.join("fund_ledger.csv"))?,
            credits: read_csv(&dir.join("credits.csv"))?,
            prices: read_csv(&dir.join("prices.csv"))?,
            roster: balances.iter().map(|b| b.peer).collect(),
            final_balances: balances.iter().map(|b| (b.peer, b.balance_cents)).collect(),
        })
    }

    /// Recomputes the report and participation figures from the logs alone.
    pub fn reaggregate(&self) -> (DonationReport, ParticipationStats) {
        let clearing: Vec<UnitPrice> = self.prices.iter().map(|p| p.clearing_price_cents).collect();
        (
            metrics::aggregate(&self.donations, &self.fund, &clearing),
            metrics::participation(&self.donations, &self.roster),
        )
    }
}

/// A scenario sweep: a base scenario plus either an explicit list of
/// overrides or the cross product of algorithms and balance percentages.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub base: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub algorithms: Vec<DonationAlgorithm>,
    #[serde(default)]
    pub balance_percentages: Vec<serde_json::Value>,
    #[serde(default)]
    pub scenarios: Vec<serde_json::Map<String, serde_json::Value>>,
}

impl MatrixConfig {
    pub fn load(path: &Path) -> Result<Vec<ScenarioConfig>, EngineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let wrap = |e: EngineError| EngineError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let m: MatrixConfig = serde_json::from_str(&text).map_err(|e| wrap(EngineError::Config(e.to_string())))?;
        m.expand(&base_dir).map_err(wrap)
    }

    pub fn expand(&self, base_dir: &Path) -> Result<Vec<ScenarioConfig>, EngineError> {
        let mut overrides = self.scenarios.clone();
        if !self.algorithms.is_empty() || !self.balance_percentages.is_empty() {
            if !overrides.is_empty() {
                return Err(EngineError::Config(
                    "use either `scenarios` or `algorithms` x `balance_percentages`, not both".into(),
                ));
            }
            let algorithms = if self.algorithms.is_empty() {
                vec![self.base_value_algorithm()?]
            } else {
                self.algorithms.clone()
            };
            let pcts = if self.balance_percentages.is_empty() {
                vec![self
                    .base
                    .get("balance_percentage")
                    .cloned()
                    .ok_or_else(|| EngineError::Config("missing balance_percentage".into()))?]
            } else {
                self.balance_percentages.clone()
            };
            for p in &pcts {
                for a in &algorithms {
                    let mut o = serde_json::Map::new();
                    o.insert("donation_algorithm".into(), serde_json::to_value(a).expect("serializable"));
                    o.insert("balance_percentage".into(), p.clone());
                    overrides.push(o);
                }
            }
        }
        if overrides.is_empty() {
            return Err(EngineError::Config("the matrix has no scenarios".into()));
        }
        let base_id = self.base.get("id").and_then(|v| v.as_str()).unwrap_or("scenario").to_string();
        let mut out = Vec::with_capacity(overrides.len());
        let mut ids = BTreeSet::new();
        for o in overrides {
            let mut merged = self.base.clone();
            let explicit_id = o.contains_key("id");
            merged.extend(o);
            let mut c: ScenarioConfig = serde_json::from_value(serde_json::Value::Object(merged))
                .map_err(|e| EngineError::Config(e.to_string()))?;
            if !explicit_id {
                c.id = format!(
                    "{base_id}-{}-{}",
                    c.donation_algorithm.label().to_ascii_lowercase(),
                    c.balance_percentage.percent_label()
                );
            }
            if !ids.insert(c.id.clone()) {
                return Err(EngineError::Config(format!("duplicate scenario id `{}`", c.id)));
            }
            c.base_dir = base_dir.to_path_buf();
            out.push(c);
        }
        Ok(out)
    }

    fn base_value_algorithm(&self) -> Result<DonationAlgorithm, EngineError> {
        let v = self
            .base
            .get("donation_algorithm")
            .cloned()
            .ok_or_else(|| EngineError::Config("missing donation_algorithm".into()))?;
        serde_json::from_value(v).map_err(|e| EngineError::Config(e.to_string()))
    }
}

pub struct MatrixCell {
    pub config: ScenarioConfig,
    pub outcome: Result<RunArtifacts, EngineError>,
}

pub struct MatrixOutcome {
    pub cells: Vec<MatrixCell>,
    pub table: metrics::MatrixTable,
    /// `None` when any cell failed.
    pub comparison: Option<Result<metrics::Comparison, metrics::MetricsError>>,
}

impl MatrixOutcome {
    pub fn failures(&self) -> impl Iterator<Item = (&ScenarioConfig, &EngineError)> {
        self.cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().err().map(|e| (&c.config, e)))
    }

    /// Highest exit code among failed cells, 0 when all succeeded.
    pub fn exit_code(&self) -> i32 {
        self.failures().map(|(_, e)| e.exit_code()).max().unwrap_or(0)
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), EngineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut index = Vec::new();
        for cell in &self.cells {
            let status = match &cell.outcome {
                Ok(run) => {
                    run.write_to(&dir.join(&cell.config.id))?;
                    serde_json::json!({"status": "ok"})
                }
                Err(e) => serde_json::json!({"status": "failed", "error": e.to_string()}),
            };
            let mut entry = serde_json::json!({
                "id": cell.config.id,
                "algorithm": cell.config.donation_algorithm,
                "balance_percentage": cell.config.balance_percentage,
            });
            entry.as_object_mut().expect("object").extend(status.as_object().expect("object").clone());
            index.push(entry);
        }
        let write = |name: &str, bytes: Vec<u8>| {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(io_err(&path))
        };
        let mut idx = serde_json::to_vec_pretty(&index).expect("serializable");
        idx.push(b'\n');
        write("matrix.json", idx)?;
        write("comparison.csv", self.table.to_csv().into_bytes())?;
        write("comparison.txt", self.table.to_text().into_bytes())?;
        let mut cmp = serde_json::to_vec_pretty(&self.comparison_json()).expect("serializable");
        cmp.push(b'\n');
        write("comparison.json", cmp)
    }

    pub fn comparison_json(&self) -> serde_json::Value {
        let comparison = match &self.comparison {
            Some(Ok(c)) => serde_json::to_value(c).expect("serializable"),
            Some(Err(e)) => serde_json::json!({"error": e.to_string()}),
            None => serde_json::Value::Null,
        };
        serde_json::json!({
            "table": self.table,
            "comparison": comparison,
            "failed": self.failures().map(|(c, e)| serde_json::json!({"id": c.id, "error": e.to_string()})).collect::<Vec<_>>(),
        })
    }
}

/// Runs every scenario (in parallel on `jobs` threads, 0 meaning all cores)
/// over one shared readings input and compares the results.
pub fn run_matrix(configs: Vec<ScenarioConfig>, jobs: usize) -> Result<MatrixOutcome, EngineError> {
    let first = configs
        .first()
        .ok_or_else(|| EngineError::Config("the matrix has no scenarios".into()))?;
    first.validate()?;
    let key = first.readings_key();
    if let Some(other) = configs.iter().find(|c| c.readings_key() != key) {
        return Err(EngineError::Config(format!(
            "scenario `{}` uses different readings than `{}`",
            other.id, first.id
        )));
    }
    let readings = first.load_readings()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EngineError::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<RunArtifacts, EngineError>> =
        pool.install(|| configs.par_iter().map(|c| run_with_readings(c, &readings)).collect());
    let cells: Vec<MatrixCell> = configs
        .into_iter()
        .zip(outcomes)
        .map(|(config, outcome)| MatrixCell { config, outcome })
        .collect();

    let entries: Vec<metrics::MatrixEntry> = cells
        .iter()
        .map(|c| metrics::MatrixEntry {
            algorithm: c.config.donation_algorithm,
            percentage: c.config.balance_percentage,
            report: c.outcome.as_ref().ok().map(|r| &r.report),
        })
        .collect();
    let table = metrics::matrix_table(&entries);
    let comparison = cells.iter().all(|c| c.outcome.is_ok()).then(|| {
        let reports: Vec<_> = cells
            .iter()
            .map(|c| {
                let r = c.outcome.as_ref().expect("all ok");
                (r.algorithm, r.balance_percentage, &r.report)
            })
            .collect();
        metrics::compare(&reports)
    });
    Ok(MatrixOutcome {
        cells,
        table,
        comparison,
    })
}
