//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use donation_sim::donation::{DonationAlgorithm, DonationEvent, DonationSource, Payee};
use donation_sim::engine::{run, run_with_readings, PriceSource, RunArtifacts, ScenarioConfig};
use donation_sim::governance::{Account, Governance, ProposalId, ProposalStatus, Vote, VoteDirection};
use donation_sim::ingestion::{generate_synthetic, Reading, ReadingSeries, SyntheticConfig};
use donation_sim::model::PeerId;
use donation_sim::pricing::{evaluate, DemandSupplySnapshot};
use donation_sim::quantity::{EnergyQuantity, Fraction, MoneyAmount, UnitPrice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn constant_price(c: &ScenarioConfig) -> u64 {
    match c.utility_price_cents_per_kwh {
        PriceSource::Constant(p) => p,
        PriceSource::Series(_) => unreachable!("constant-price scenario"),
    }
}

fn pricing_bounds() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..10_000 {
        let fit = rng.gen_range(0..100u64);
        let up = fit + rng.gen_range(0..100u64);
        let hist = [0; 3].map(|_| UnitPrice(rng.gen_range(0..300)));
        let offers = if i % 10 == 0 { 0 } else { rng.gen_range(0..1_000_000) };
        let snap = DemandSupplySnapshot {
            requests: EnergyQuantity(rng.gen_range(0..1_000_000)),
            offers: EnergyQuantity(offers),
        };
        let p = evaluate(UnitPrice(fit), UnitPrice(up), hist, snap).map_err(|e| e.to_string())?;
        ensure(p.0 >= fit && p.0 <= up, || format!("price {p} outside [{fit}, {up}]"))?;
        if offers == 0 {
            ensure(p.0 == up, || format!("O = 0 gave {p}, expected {up}"))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 1.0, || format!("took {secs:.2} s"))?;
    Ok(format!("10000 inputs in {secs:.3} s"))
}

fn conservation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut hours = 0;
    for i in 0..100 {
        let c = common::random_scenario(&mut rng, &format!("c{i}"));
        let readings = generate_synthetic(c.synthetic.as_ref().unwrap(), c.seed).map_err(|e| e.to_string())?;
        let a = run_with_readings(&c, &readings).map_err(|e| format!("scenario {i}: {e}"))?;
        let up = constant_price(&c);
        common::check_run(&c, &readings, &|_| up, &a.files()).map_err(|e| format!("scenario {i}: {e}"))?;
        hours += readings.len();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1} s"))?;
    Ok(format!("100 scenarios, {hours} hours replayed in {secs:.1} s"))
}

fn run_all(c: &ScenarioConfig, readings: &ReadingSeries) -> Result<BTreeMap<DonationAlgorithm, RunArtifacts>, String> {
    DonationAlgorithm::ALL
        .iter()
        .map(|&a| {
            let mut c = c.clone();
            c.donation_algorithm = a;
            run_with_readings(&c, readings).map(|r| (a, r)).map_err(|e| e.to_string())
        })
        .collect()
}

fn hed_dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut strict = 0;
    let n = 40;
    for i in 0..n {
        let mut c = common::random_scenario(&mut rng, &format!("d{i}"));
        c.synthetic.as_mut().unwrap().prosumer_fraction = Fraction::new(rng.gen_range(1..=3), 4);
        let readings = generate_synthetic(c.synthetic.as_ref().unwrap(), c.seed).map_err(|e| e.to_string())?;
        let runs = run_all(&c, &readings)?;
        let total = |a| runs[&a].report.total_donated_wh.0;
        let hed = total(DonationAlgorithm::Hed);
        for other in [DonationAlgorithm::P2pd, DonationAlgorithm::P2d, DonationAlgorithm::Ug2d] {
            ensure(hed >= total(other), || {
                format!("scenario {i}: HED {hed} Wh < {other} {} Wh", total(other))
            })?;
        }
        let p2pd = &runs[&DonationAlgorithm::P2pd];
        let funded = runs[&DonationAlgorithm::Hed].report.fund_deposits_cents.0 > 0;
        let short = p2pd.report.total_donated_wh < p2pd.summary.donation_requested_wh;
        if funded && short && hed > total(DonationAlgorithm::P2pd) {
            strict += 1;
        }
    }
    ensure(strict > 0, || "HED never strictly beat P2PD with funds and a shortage".into())?;
    Ok(format!("{n} scenarios, HED > P2PD strictly in {strict} funded shortage scenarios"))
}

fn constant_series(hours: usize, rows: &[(u64, u64)]) -> ReadingSeries {
    let start = chrono::NaiveDate::from_ymd_opt(2021, 9, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let timestamps = (0..hours).map(|h| start + chrono::Duration::hours(h as i64)).collect();
    let readings = rows
        .iter()
        .map(|&(p, c)| {
            vec![
                Reading {
                    production: EnergyQuantity(p),
                    consumption: EnergyQuantity(c),
                };
                hours
            ]
        })
        .collect();
    ReadingSeries::from_dense(timestamps, (0..rows.len() as u32).map(PeerId).collect(), readings)
}

fn p2d_over_ug2d() -> Outcome {
    // Consumers can never afford their need, so there are no buy requests and
    // the clearing price sits at the feed-in tariff, a third of the utility price.
    let hours = 24 * 90;
    let readings = constant_series(hours, &[(50_000, 0), (50_000, 0), (0, 5000), (0, 5000)]);
    let mut c = common::base_config("ratio", DonationAlgorithm::P2d, SyntheticConfig::new(2, 1, 0));
    c.synthetic = None;
    c.readings_path = Some(PathBuf::from("-"));
    c.fit_cents_per_kwh = 10;
    c.utility_price_cents_per_kwh = PriceSource::Constant(30);
    c.balance_percentage = Fraction::new(1, 10_000);
    c.balance_carryover = false;
    let p2d = run_with_readings(&c, &readings).map_err(|e| e.to_string())?;
    c.donation_algorithm = DonationAlgorithm::Ug2d;
    let ug2d = run_with_readings(&c, &readings).map_err(|e| e.to_string())?;
    ensure(p2d.prices.iter().all(|p| p.clearing_price_cents.0 == 10), || "clearing price left the FiT".into())?;
    ensure(p2d.summary.traded_wh.is_zero(), || "consumers traded".into())?;
    let a = p2d.report.total_donated_wh.0 as f64;
    let b = ug2d.report.total_donated_wh.0 as f64;
    ensure(b > 0.0, || "UG2D donated nothing".into())?;
    let ratio = a / b;
    let target = 30.0 / 10.0;
    ensure((ratio / target - 1.0).abs() <= 0.02, || format!("ratio {ratio:.4}, expected {target} +/- 2%"))?;
    Ok(format!("P2D/UG2D = {ratio:.4} (up/p = {target})"))
}

fn cost_identity() -> Outcome {
    // hourly utility prices that vary, so the weighted means are non-trivial
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = SyntheticConfig::new(12, 2, 9);
    let readings = generate_synthetic(&synth, 0).map_err(|e| e.to_string())?;
    let mut csv = String::from("timestamp,price_cents_per_kwh\n");
    for (h, ts) in readings.timestamps().iter().enumerate() {
        csv.push_str(&format!("{},{}\n", ts.format("%Y-%m-%dT%H:%M"), 14 + (h * 7) % 17));
    }
    std::fs::write(tmp.path().join("prices.csv"), csv).map_err(|e| e.to_string())?;
    let mut details = Vec::new();
    for (algorithm, pct) in [
        (DonationAlgorithm::P2d, Fraction::new(5, 1000)),
        (DonationAlgorithm::Ug2d, Fraction::new(5, 1000)),
        (DonationAlgorithm::P2d, Fraction::new(2, 100)),
        (DonationAlgorithm::Ug2d, Fraction::new(2, 100)),
    ] {
        let mut c = common::base_config("cost", algorithm, synth.clone());
        c.base_dir = tmp.path().to_path_buf();
        c.utility_price_cents_per_kwh = PriceSource::Series(PathBuf::from("prices.csv"));
        c.balance_percentage = pct;
        let r = run(&c).map_err(|e| e.to_string())?;
        let events: Vec<&DonationEvent> = r.donations.iter().filter(|e| e.source.is_funded()).collect();
        ensure(!events.is_empty(), || format!("{algorithm} bought nothing"))?;
        let wh: u64 = events.iter().map(|e| e.quantity_wh.0).sum();
        let price_of = |e: &DonationEvent| {
            let p = &r.prices[e.timestep as usize];
            match e.source {
                DonationSource::GridFunded => p.utility_price_cents.0,
                _ => p.clearing_price_cents.0,
            }
        };
        let weighted: f64 = events.iter().map(|e| e.quantity_wh.0 as f64 * price_of(e) as f64).sum::<f64>() / wh as f64;
        let cost = r
            .report
            .external_cost_cents_per_mwh
            .ok_or("cost undefined")?
            .to_f64()
            / 1000.0;
        ensure((cost - weighted).abs() <= 1.0, || {
            format!("{algorithm}: cost {cost:.4} ct/kWh vs weighted price {weighted:.4}")
        })?;
        details.push(format!("{algorithm} {cost:.3} vs {weighted:.3}"));
    }
    Ok(format!("ct/kWh {}", details.join(", ")))
}

fn degradation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..20 {
        // a percentage this small rounds every credit, and so every deposit, to zero
        let mut c = common::random_scenario(&mut rng, &format!("g{i}"));
        c.balance_percentage = Fraction::new(1, 1_000_000_000);
        let readings = generate_synthetic(c.synthetic.as_ref().unwrap(), c.seed).map_err(|e| e.to_string())?;
        let logs = |a: DonationAlgorithm, c: &ScenarioConfig, r: &ReadingSeries| -> Result<Vec<u8>, String> {
            let mut c = c.clone();
            c.donation_algorithm = a;
            let run = run_with_readings(&c, r).map_err(|e| e.to_string())?;
            ensure(run.report.fund_deposits_cents.is_zero(), || format!("scenario {i}: fund is not empty"))?;
            Ok(run.files().into_iter().find(|(n, _)| *n == "donations.csv").unwrap().1)
        };
        let (hed, p2pd) = (logs(DonationAlgorithm::Hed, &c, &readings)?, logs(DonationAlgorithm::P2pd, &c, &readings)?);
        ensure(hed == p2pd, || format!("scenario {i}: HED != P2PD with no funds ({})", first_difference(&hed, &p2pd)))?;

        // no prosumers: no surplus anywhere
        let mut c = common::random_scenario(&mut rng, &format!("h{i}"));
        c.synthetic.as_mut().unwrap().prosumer_fraction = Fraction::new(0, 1);
        let readings = generate_synthetic(c.synthetic.as_ref().unwrap(), c.seed).map_err(|e| e.to_string())?;
        let runs: Vec<Vec<u8>> = [DonationAlgorithm::Hed, DonationAlgorithm::Ug2d]
            .into_iter()
            .map(|a| {
                let mut c = c.clone();
                c.donation_algorithm = a;
                run_with_readings(&c, &readings)
                    .map(|r| r.files().into_iter().find(|(n, _)| *n == "donations.csv").unwrap().1)
                    .map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        ensure(runs[0] == runs[1], || {
            format!("scenario {i}: HED != UG2D without surplus ({})", first_difference(&runs[0], &runs[1]))
        })?;
    }
    Ok("20 + 20 scenarios with byte-equal donation logs".into())
}

fn first_difference(a: &[u8], b: &[u8]) -> String {
    let (a, b) = (String::from_utf8_lossy(a), String::from_utf8_lossy(b));
    match a.lines().zip(b.lines()).find(|(x, y)| x != y) {
        Some((x, y)) => format!("`{x}` vs `{y}`"),
        None => format!("{} vs {} lines", a.lines().count(), b.lines().count()),
    }
}

#[derive(Default)]
struct TokenModel {
    balances: BTreeMap<Account, u64>,
    minted: u64,
    burned: u64,
    proposals: Vec<(u32, bool)>, // closes_at, still open
}

fn governance_sequences() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let accounts = [
        Account::ExternalDonors,
        Account::Peer(PeerId(0)),
        Account::Peer(PeerId(1)),
        Account::Peer(PeerId(2)),
    ];
    let (mut accepted, mut rejected) = (0, 0);
    for seq in 0..10_000 {
        let mut g = Governance::new();
        let mut m = TokenModel::default();
        let mut now = 0u32;
        for _ in 0..rng.gen_range(1..30) {
            now += rng.gen_range(0..3);
            match rng.gen_range(0..4) {
                0 => {
                    let supplier = rng.gen_range(0..3);
                    let direct = rng.gen_bool(0.5);
                    let wh = rng.gen_range(0..20_000);
                    let event = DonationEvent {
                        timestep: now,
                        donee: PeerId(9),
                        quantity_wh: EnergyQuantity(wh),
                        source: if direct { DonationSource::PeerDirect } else { DonationSource::PeerFunded },
                        payee: if direct { Payee::None } else { Payee::Peer(PeerId(supplier)) },
                        payment_cents: MoneyAmount(0),
                        supplier: Some(PeerId(supplier)),
                    };
                    let account = if direct { Account::Peer(PeerId(supplier)) } else { Account::ExternalDonors };
                    let amount = (wh + 500) / 1000;
                    g.mint_on_donation(&event, 0, 1);
                    *m.balances.entry(account).or_default() += amount;
                    m.minted += amount;
                }
                1 => {
                    let closes = now + rng.gen_range(0..5);
                    g.open_proposal(PeerId(rng.gen_range(0..3)), now, closes, rng.gen_range(0..5));
                    m.proposals.push((closes, true));
                }
                2 => {
                    let voter = accounts[rng.gen_range(0..accounts.len())];
                    let have = m.balances.get(&voter).copied().unwrap_or(0);
                    let burn = rng.gen_range(0..=have + 2);
                    let pid = rng.gen_range(0..=m.proposals.len() as u32);
                    let vote = Vote {
                        voter,
                        proposal: ProposalId(pid),
                        direction: if rng.gen_bool(0.5) { VoteDirection::For } else { VoteDirection::Against },
                        burn_amount: burn,
                    };
                    let ok = burn > 0
                        && burn <= have
                        && m.proposals.get(pid as usize).is_some_and(|&(closes, open)| open && now < closes);
                    let before = g.state_json();
                    let log_len = g.log().len();
                    let result = g.cast_vote(&vote, now);
                    if ok {
                        result.map_err(|e| format!("sequence {seq}: valid vote refused: {e}"))?;
                        *m.balances.get_mut(&voter).unwrap() -= burn;
                        m.burned += burn;
                        accepted += 1;
                    } else {
                        ensure(result.is_err(), || format!("sequence {seq}: invalid vote accepted"))?;
                        ensure(g.state_json() == before && g.log().len() == log_len, || {
                            format!("sequence {seq}: rejected vote changed state")
                        })?;
                        rejected += 1;
                    }
                }
                _ => {
                    for (id, _) in g.resolve_due(now) {
                        m.proposals[id.0 as usize].1 = false;
                    }
                }
            }
            let t = g.tokens();
            t.check_supply().map_err(|e| format!("sequence {seq}: {e}"))?;
            ensure(t.total_supply() == m.minted - m.burned, || format!("sequence {seq}: supply drift"))?;
            for a in accounts {
                ensure(t.balance(a) == m.balances.get(&a).copied().unwrap_or(0), || {
                    format!("sequence {seq}: balance of {a} drifted")
                })?;
            }
        }
        let replayed = Governance::replay(&Governance::parse_jsonl(&g.log_jsonl()).map_err(|e| e.to_string())?)
            .map_err(|e| format!("sequence {seq}: replay failed: {e}"))?;
        ensure(replayed.state_json() == g.state_json(), || format!("sequence {seq}: replay differs"))?;
        ensure(
            g.proposals().iter().all(|p| p.status != ProposalStatus::Open || m.proposals[p.id.0 as usize].1),
            || format!("sequence {seq}: proposal status drift"),
        )?;
    }
    Ok(format!(
        "10000 sequences, {accepted} votes accepted, {rejected} rejected, in {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

fn golden() -> Outcome {
    let tests = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests");
    let c = ScenarioConfig::load(&tests.join("data/golden.json")).map_err(|e| e.to_string())?;
    let a = run(&c).map_err(|e| e.to_string())?.files();
    let b = run(&c).map_err(|e| e.to_string())?.files();
    ensure(a == b, || "repeated executions differ".into())?;
    for (name, bytes) in &a {
        let committed = std::fs::read(tests.join("golden").join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(committed == *bytes, || format!("{name} differs from the committed golden file"))?;
    }
    Ok(format!("{} artifact files match", a.len()))
}

fn pricing_examples() -> Outcome {
    let h = [UnitPrice(10), UnitPrice(12), UnitPrice(14)];
    let snap = |r, o| DemandSupplySnapshot {
        requests: EnergyQuantity(r),
        offers: EnergyQuantity(o),
    };
    let got = [snap(4000, 4000), snap(40_000, 4000), snap(0, 4000)]
        .map(|s| evaluate(UnitPrice(5), UnitPrice(20), h, s).map(|p| p.0));
    ensure(got == [Ok(12), Ok(20), Ok(5)], || format!("got {got:?}"))?;
    Ok("12, 20, 5".into())
}

fn table_shape() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("m.json");
    std::fs::write(
        &cfg,
        r#"{"base": {"id": "shape", "balance_percentage": 0.005, "utility_price_cents_per_kwh": 20,
                     "fit_cents_per_kwh": 5, "donation_algorithm": "hed", "seed": 4,
                     "synthetic": {"peer_count": 5, "months": 1}},
            "algorithms": ["ug2d", "p2d", "p2pd", "hed"], "balance_percentages": [0.0005, 0.005, 0.02]}"#,
    )
    .map_err(|e| e.to_string())?;
    let out = tmp.path().join("out");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_donation-sim"))
        .args(["matrix", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
    let text = std::fs::read_to_string(out.join("comparison.csv")).map_err(|e| e.to_string())?;
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let rows: Vec<Vec<String>> = r
        .records()
        .map(|x| x.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure(rows.len() == 5 && rows.iter().all(|r| r.len() == 13), || format!("shape {}x?", rows.len()))?;
    let groups: Vec<&str> = rows[0].iter().skip(1).step_by(4).map(String::as_str).collect();
    ensure(
        groups == ["Balance Percentage: 0.05", "Balance Percentage: 0.5", "Balance Percentage: 2"],
        || format!("groups {groups:?}"),
    )?;
    ensure(rows[0].iter().skip(1).enumerate().all(|(i, c)| (i % 4 == 0) != c.is_empty()), || "group spans".into())?;
    let algs: Vec<&str> = rows[1].iter().skip(1).map(String::as_str).collect();
    ensure(algs == ["UG2D", "P2D", "P2PD", "HED"].repeat(3), || format!("algorithms {algs:?}"))?;
    let labels: Vec<&str> = rows[2..].iter().map(|r| r[0].as_str()).collect();
    ensure(
        labels == ["External Donations (MW)", "Internal Donations (GW)", "Total Donated (MW)"],
        || format!("rows {labels:?}"),
    )?;
    for g in 0..3 {
        let col = |a: usize| 1 + g * 4 + a;
        ensure(rows[2][col(2)] == "N.A.", || "P2PD external should be N.A.".into())?;
        ensure(rows[3][col(0)] == "N.A." && rows[3][col(1)] == "N.A.", || "UG2D/P2D internal should be N.A.".into())?;
        for a in 0..4 {
            ensure(rows[4][col(a)].parse::<f64>().is_ok(), || format!("total cell `{}`", rows[4][col(a)]))?;
        }
    }
    let dirs = std::fs::read_dir(&out).map_err(|e| e.to_string())?.filter(|e| e.as_ref().is_ok_and(|e| e.path().is_dir())).count();
    ensure(dirs == 12, || format!("{dirs} run directories"))?;
    Ok("3 rows x (3 percentages x 4 algorithms), 12 run directories".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("pricing bounds", pricing_bounds),
        ("conservation suite", conservation),
        ("HED dominance", hed_dominance),
        ("P2D vs UG2D ordering", p2d_over_ug2d),
        ("cost-per-unit identity", cost_identity),
        ("HED degradation equivalences", degradation),
        ("governance ledger", governance_sequences),
        ("determinism golden run", golden),
        ("pricing worked values", pricing_examples),
        ("table-shape fidelity", table_shape),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {name} ({detail}; {secs:.2} s)", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {:>2}. {name}: {reason}", i + 1);
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
