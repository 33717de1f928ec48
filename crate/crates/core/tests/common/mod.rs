//! Shared helpers for the integration and acceptance targets: random
//! scenario generation and an independent log-replay oracle.
//!
//! The oracle reads the CSV/JSON artifacts back as plain text records and
//! recomputes balances, fund, energy flows and credits without calling into
//! the engine, trading or donation code.

#![allow(dead_code)]

use std::collections::BTreeMap;

use donation_sim::donation::DonationAlgorithm;
use donation_sim::engine::{PriceSource, ScenarioConfig};
use donation_sim::governance::Governance;
use donation_sim::ingestion::{ReadingSeries, SyntheticConfig};
use donation_sim::quantity::Fraction;
use rand::Rng;

pub fn base_config(id: &str, algorithm: DonationAlgorithm, synthetic: SyntheticConfig) -> ScenarioConfig {
    let mut c = ScenarioConfig::from_json(
        r#"{"id": "x", "balance_percentage": 0.005, "utility_price_cents_per_kwh": 20,
            "fit_cents_per_kwh": 5, "donation_algorithm": "hed", "readings_path": "-"}"#,
        std::path::Path::new("."),
    )
    .expect("valid base config");
    c.id = id.to_string();
    c.donation_algorithm = algorithm;
    c.readings_path = None;
    c.synthetic = Some(synthetic);
    c
}

/// A random small community: 2..=20 peers over 1..=3 months.
pub fn random_scenario(rng: &mut impl Rng, id: &str) -> ScenarioConfig {
    let peers = rng.gen_range(2..=20);
    let months = rng.gen_range(1..=3);
    let mut synth = SyntheticConfig::new(peers, months, rng.gen());
    synth.prosumer_fraction = Fraction::new(rng.gen_range(0..=4), 4);
    synth.start = chrono::NaiveDate::from_ymd_opt(2021, rng.gen_range(1..=12), 1).unwrap();
    synth.peak_production_wh = rng.gen_range(500..=6000);
    synth.base_consumption_wh = rng.gen_range(200..=2000);
    let algorithm = DonationAlgorithm::ALL[rng.gen_range(0..4)];
    let mut c = base_config(id, algorithm, synth);
    c.seed = rng.gen();
    c.balance_percentage = [Fraction::new(5, 10_000), Fraction::new(5, 1000), Fraction::new(2, 100), Fraction::new(1, 10)]
        [rng.gen_range(0..4)];
    let up = rng.gen_range(5..=40);
    c.utility_price_cents_per_kwh = PriceSource::Constant(up);
    c.fit_cents_per_kwh = rng.gen_range(0..=up);
    c.balance_carryover = rng.gen_bool(0.7);
    c.mint_tokens_per_kwh = rng.gen_range(0..=3);
    c
}

type Row = BTreeMap<String, String>;

fn rows(bytes: &[u8]) -> Vec<Row> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers().expect("header").clone();
    r.records()
        .map(|rec| {
            let rec = rec.expect("record");
            headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()
        })
        .collect()
}

fn num(row: &Row, key: &str) -> u64 {
    row[key].parse().unwrap_or_else(|_| panic!("column {key} = `{}`", row[key]))
}

fn half_up(num: u128, den: u128) -> u128 {
    (2 * num + den) / (2 * den)
}

pub struct Replay {
    pub received_wh: u64,
    pub supplied_wh: u64,
    pub grid_wh: u64,
    pub final_balances: BTreeMap<u64, u64>,
    pub fund: u64,
}

/// Checks the energy and money conservation laws of one run from its
/// artifact files. Returns a description of the first violation.
pub fn check_run(
    config: &ScenarioConfig,
    readings: &ReadingSeries,
    utility: &dyn Fn(usize) -> u64,
    files: &[(&str, Vec<u8>)],
) -> Result<Replay, String> {
    let file = |name: &str| files.iter().find(|(n, _)| *n == name).map(|(_, b)| b.as_slice()).expect(name);
    let trades = rows(file("trades.csv"));
    let donations = rows(file("donations.csv"));
    let fund = rows(file("fund_ledger.csv"));
    let credits = rows(file("credits.csv"));
    let prices = rows(file("prices.csv"));
    let balances = rows(file("balances.csv"));
    let fit = config.fit_cents_per_kwh;

    if prices.len() != readings.len() {
        return Err(format!("{} price rows for {} hours", prices.len(), readings.len()));
    }
    let clearing: Vec<u64> = prices.iter().map(|r| num(r, "clearing_price_cents")).collect();
    for (t, p) in clearing.iter().enumerate() {
        let up = utility(t);
        if *p < fit || *p > up {
            return Err(format!("t={t}: price {p} outside [{fit}, {up}]"));
        }
    }

    // per-hour energy positions from the raw readings
    let index: BTreeMap<u64, usize> = readings.peers().iter().enumerate().map(|(i, p)| (p.0 as u64, i)).collect();
    let net = |peer: u64, t: usize| -> i64 {
        let r = readings.reading(index[&peer], t);
        r.production.0 as i64 - r.consumption.0 as i64
    };
    let mut out_flow: BTreeMap<(usize, u64), u64> = BTreeMap::new();
    let mut in_flow: BTreeMap<(usize, u64), u64> = BTreeMap::new();
    let (mut received, mut supplied, mut grid) = (0u64, 0u64, 0u64);
    for tr in &trades {
        let t = num(tr, "timestep") as usize;
        let q = num(tr, "quantity_wh");
        let p = num(tr, "unit_price_cents");
        if q == 0 || p != clearing[t] {
            return Err(format!("t={t}: bad trade quantity {q} or price {p}"));
        }
        if num(tr, "payment_cents") as u128 != half_up(q as u128 * p as u128, 1000) {
            return Err(format!("t={t}: payment is not round(q * p)"));
        }
        *out_flow.entry((t, num(tr, "seller"))).or_default() += q;
        *in_flow.entry((t, num(tr, "buyer"))).or_default() += q;
        received += q;
        supplied += q;
    }
    let mut grid_payments = 0u64;
    let mut peer_payments: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    let mut event_payments = 0u64;
    let mut mintable = 0u64;
    for d in &donations {
        let t = num(d, "timestep") as usize;
        let q = num(d, "quantity_wh");
        let pay = num(d, "payment_cents");
        event_payments += pay;
        mintable += half_up(q as u128 * config.mint_tokens_per_kwh as u128, 1000) as u64;
        *in_flow.entry((t, num(d, "donee"))).or_default() += q;
        received += q;
        match d["source"].as_str() {
            "grid_funded" => {
                if d["payee"] != "grid" || !d["supplier"].is_empty() {
                    return Err(format!("t={t}: grid donation with a peer payee"));
                }
                if pay as u128 != half_up(q as u128 * utility(t) as u128, 1000) {
                    return Err(format!("t={t}: grid donation not priced at the utility price"));
                }
                grid += q;
                grid_payments += pay;
            }
            "peer_funded" => {
                let s = num(d, "supplier");
                if d["payee"] != s.to_string() {
                    return Err(format!("t={t}: peer-funded payee differs from supplier"));
                }
                if pay as u128 != half_up(q as u128 * clearing[t] as u128, 1000) {
                    return Err(format!("t={t}: peer-funded donation not at the clearing price"));
                }
                *out_flow.entry((t, s)).or_default() += q;
                *peer_payments.entry((t as u64, s)).or_default() += pay;
                supplied += q;
            }
            "peer_direct" => {
                if pay != 0 || !d["payee"].is_empty() {
                    return Err(format!("t={t}: direct donation carries a payment"));
                }
                *out_flow.entry((t, num(d, "supplier"))).or_default() += q;
                supplied += q;
            }
            other => return Err(format!("unknown source {other}")),
        }
    }
    for (&(t, peer), &q) in &out_flow {
        let n = net(peer, t);
        if n <= 0 || q > n as u64 {
            return Err(format!("t={t}: peer {peer} gave {q} Wh with net position {n}"));
        }
    }
    for (&(t, peer), &q) in &in_flow {
        let n = net(peer, t);
        if n >= 0 || q > n.unsigned_abs() {
            return Err(format!("t={t}: peer {peer} received {q} Wh with net position {n}"));
        }
    }
    if received != supplied + grid {
        return Err(format!("energy: received {received} != supplied {supplied} + grid {grid}"));
    }

    // credits recomputed from readings and the utility price
    let pct = config.balance_percentage;
    let mut month_of = Vec::with_capacity(readings.len());
    for ts in readings.timestamps() {
        use chrono::Datelike;
        month_of.push((ts.year(), ts.month()));
    }
    let mut expected_credit: BTreeMap<(usize, u64), u64> = BTreeMap::new();
    let mut month_start = 0usize;
    let mut monthly_totals = Vec::new();
    for t in 0..=readings.len() {
        if t == readings.len() || month_of[t] != month_of[month_start] {
            let mut community = 0u64;
            for (&peer, &i) in &index {
                let bill: u128 = (month_start..t)
                    .map(|h| {
                        let r = readings.reading(i, h);
                        r.consumption.0.saturating_sub(r.production.0) as u128 * utility(h) as u128
                    })
                    .sum();
                let c = half_up(bill * pct.numer() as u128, 1000 * pct.denom() as u128) as u64;
                community += c;
                if c > 0 {
                    expected_credit.insert((month_start, peer), c);
                }
            }
            monthly_totals.push((month_start, community));
            month_start = t;
        }
    }
    let deposit = half_up(
        monthly_totals.iter().map(|m| m.1 as u128).sum(),
        monthly_totals.len() as u128,
    ) as u64;

    // money replay, hour by hour: credits, trades, fund payouts
    let mut balance: BTreeMap<u64, u64> = index.keys().map(|&p| (p, 0)).collect();
    let mut fund_avail = 0u64;
    type HourRows<'a> = (Vec<&'a Row>, Vec<&'a Row>, Vec<&'a Row>);
    let mut by_t: BTreeMap<usize, HourRows> = BTreeMap::new();
    for c in &credits {
        by_t.entry(num(c, "timestep") as usize).or_default().0.push(c);
    }
    for tr in &trades {
        by_t.entry(num(tr, "timestep") as usize).or_default().1.push(tr);
    }
    for f in &fund {
        by_t.entry(num(f, "timestep") as usize).or_default().2.push(f);
    }
    let mut seen_credit = BTreeMap::new();
    let (mut total_credit, mut total_forfeit, mut total_deposit, mut fund_grid, mut fund_peer) = (0, 0, 0, 0, 0);
    for (t, (cs, ts, fs)) in by_t {
        for c in cs {
            let peer = num(c, "peer");
            let amount = num(c, "amount_cents");
            let b = balance.get_mut(&peer).ok_or(format!("credit for unknown peer {peer}"))?;
            match c["kind"].as_str() {
                "credit" => {
                    *b += amount;
                    total_credit += amount;
                    seen_credit.insert((t, peer), amount);
                }
                "forfeit" => {
                    if config.balance_carryover || *b != amount {
                        return Err(format!("t={t}: forfeit of {amount} against balance {b}"));
                    }
                    *b = 0;
                    total_forfeit += amount;
                }
                k => return Err(format!("unknown credit kind {k}")),
            }
        }
        for f in &fs {
            let amount = num(f, "amount_cents");
            if f["kind"] == "deposit" {
                if f["counterparty"] != "external" || amount != deposit || !monthly_totals.iter().any(|m| m.0 == t) {
                    return Err(format!("t={t}: deposit {amount}, expected {deposit} at a month start"));
                }
                fund_avail += amount;
                total_deposit += amount;
            }
        }
        for tr in ts {
            let pay = num(tr, "payment_cents");
            let buyer = balance.get_mut(&num(tr, "buyer")).ok_or("unknown buyer")?;
            *buyer = buyer.checked_sub(pay).ok_or(format!("t={t}: buyer balance underflow"))?;
            *balance.get_mut(&num(tr, "seller")).ok_or("unknown seller")? += pay;
        }
        for f in &fs {
            let amount = num(f, "amount_cents");
            match (f["kind"].as_str(), f["counterparty"].as_str()) {
                ("deposit", _) => {}
                ("grid_payment", "grid") => {
                    fund_grid += amount;
                    fund_avail = fund_avail.checked_sub(amount).ok_or(format!("t={t}: fund underflow"))?;
                }
                ("prosumer_payment", peer) => {
                    let peer: u64 = peer.parse().map_err(|_| format!("bad counterparty {peer}"))?;
                    fund_avail = fund_avail.checked_sub(amount).ok_or(format!("t={t}: fund underflow"))?;
                    *balance.get_mut(&peer).ok_or("unknown payee")? += amount;
                    fund_peer += amount;
                    let due = peer_payments.get_mut(&(t as u64, peer)).ok_or(format!("t={t}: unmatched payout"))?;
                    *due = due.checked_sub(amount).ok_or(format!("t={t}: payout exceeds donations"))?;
                }
                (k, c) => return Err(format!("t={t}: unexpected fund entry {k}/{c}")),
            }
        }
    }
    if seen_credit != expected_credit {
        return Err("monthly credits differ from need x utility price x percentage".into());
    }
    if peer_payments.values().any(|&v| v != 0) {
        return Err("peer-funded donations without matching fund payouts".into());
    }
    if fund_grid != grid_payments || fund_grid + fund_peer != event_payments {
        return Err("fund payments differ from donation payments".into());
    }
    let final_balances: BTreeMap<u64, u64> =
        balances.iter().map(|r| (num(r, "peer"), num(r, "balance_cents"))).collect();
    if final_balances != balance {
        return Err("replayed balances differ from balances.csv".into());
    }
    let held: u64 = balance.values().sum::<u64>() + fund_avail;
    if held + total_forfeit + grid_payments != total_credit + total_deposit {
        return Err(format!(
            "money: held {held} + forfeited {total_forfeit} + grid {grid_payments} != credits {total_credit} + deposits {total_deposit}"
        ));
    }

    // governance log replays to the token state
    let log = std::str::from_utf8(file("governance.jsonl")).expect("utf8");
    let events = Governance::parse_jsonl(log).map_err(|e| e.to_string())?;
    let state = Governance::replay(&events).map_err(|e| e.to_string())?;
    let tokens = std::str::from_utf8(file("tokens.json")).expect("utf8");
    if state.state_json() != tokens.trim_end() {
        return Err("governance log does not replay to tokens.json".into());
    }
    let minted: u64 = state
        .tokens()
        .records()
        .iter()
        .map(|r| match r {
            donation_sim::governance::TokenRecord::Mint { amount, .. } => *amount,
            _ => 0,
        })
        .sum();
    if minted != mintable {
        return Err(format!("minted {minted} tokens, donations warrant {mintable}"));
    }

    Ok(Replay {
        received_wh: received,
        supplied_wh: supplied,
        grid_wh: grid,
        final_balances: balance,
        fund: fund_avail,
    })
}
