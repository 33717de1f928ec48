//! First-come first-served matching of offers to buy requests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MarketIntent, PeerId, PeerState};
use crate::quantity::{EnergyQuantity, MoneyAmount, UnitPrice};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TradingError {
    #[error("balance underflow for buyer {peer}: owes {owed}, holds {balance}")]
    BalanceUnderflow {
        peer: PeerId,
        owed: MoneyAmount,
        balance: MoneyAmount,
    },
    #[error("trade references unknown peer {0}")]
    UnknownPeer(PeerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trade {
    pub timestep: u32,
    pub seller: PeerId,
    pub buyer: PeerId,
    pub quantity_wh: EnergyQuantity,
    pub unit_price_cents: UnitPrice,
    pub payment_cents: MoneyAmount,
}

/// What is left of each side after matching, in arrival order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MarketResidual {
    pub surplus: Vec<(PeerId, EnergyQuantity)>,
    pub unmet_buy: Vec<(PeerId, EnergyQuantity)>,
    pub donation_need: Vec<(PeerId, EnergyQuantity)>,
}

impl MarketResidual {
    pub fn total_surplus(&self) -> EnergyQuantity {
        self.surplus.iter().map(|(_, q)| *q).sum()
    }

    pub fn total_unmet_buy(&self) -> EnergyQuantity {
        self.unmet_buy.iter().map(|(_, q)| *q).sum()
    }

    pub fn total_donation_need(&self) -> EnergyQuantity {
        self.donation_need.iter().map(|(_, q)| *q).sum()
    }
}

/// Matches with unlimited buyer budgets.
pub fn match_fcfs(
    timestep: u32,
    offers: &[MarketIntent],
    requests: &[MarketIntent],
    price: UnitPrice,
) -> (Vec<Trade>, MarketResidual) {
    match_fcfs_budgeted(timestep, offers, requests, price, |_| None)
}

/// Walks requests in arrival order and fills each from the offers in arrival
/// order, splitting intents where needed.
///
/// `budget` caps what a buyer may spend in this hour (`None` is unlimited).
/// A request whose budget runs out is closed and the walk moves on to the
/// next request; its unfilled part is reported in `unmet_buy`.
pub fn match_fcfs_budgeted(
    timestep: u32,
    offers: &[MarketIntent],
    requests: &[MarketIntent],
    price: UnitPrice,
    budget: impl Fn(PeerId) -> Option<MoneyAmount>,
) -> (Vec<Trade>, MarketResidual) {
    debug_assert!(offers.windows(2).all(|w| w[0].arrival_order <= w[1].arrival_order));
    debug_assert!(requests.windows(2).all(|w| w[0].arrival_order <= w[1].arrival_order));

    let mut remaining: Vec<u64> = offers.iter().map(|o| o.quantity.0).collect();
    let mut cursor = 0usize;
    let mut trades = Vec::new();
    let mut unmet_buy = Vec::new();

    for request in requests {
        let mut need = request.quantity.0;
        let mut wallet = budget(request.peer);
        while need > 0 && cursor < offers.len() {
            if remaining[cursor] == 0 {
                cursor += 1;
                continue;
            }
            let mut fill = need.min(remaining[cursor]);
            let mut budget_bound = false;
            if let Some(cap) = wallet.and_then(|w| price.affordable(w)) {
                if cap.0 <= fill {
                    fill = cap.0;
                    budget_bound = true;
                }
                if fill == 0 {
                    break;
                }
            }
            let quantity = EnergyQuantity(fill);
            let payment = price.cost(quantity);
            if let Some(w) = wallet.as_mut() {
                *w = w.checked_sub(payment).expect("fill bounded by budget");
            }
            trades.push(Trade {
                timestep,
                seller: offers[cursor].peer,
                buyer: request.peer,
                quantity_wh: quantity,
                unit_price_cents: price,
                payment_cents: payment,
            });
            need -= fill;
            remaining[cursor] -= fill;
            if budget_bound {
                break;
            }
        }
        if need > 0 {
            unmet_buy.push((request.peer, EnergyQuantity(need)));
        }
    }

    let surplus = offers
        .iter()
        .zip(remaining)
        .filter(|(_, r)| *r > 0)
        .map(|(o, r)| (o.peer, EnergyQuantity(r)))
        .collect();

    (
        trades,
        MarketResidual {
            surplus,
            unmet_buy,
            donation_need: Vec::new(),
        },
    )
}

/// Applies trade payments to peer balances. All-or-nothing: nothing changes
/// if any buyer cannot cover its payments.
pub fn settle(trades: &[Trade], peers: &mut BTreeMap<PeerId, PeerState>) -> Result<(), TradingError> {
    let mut owed: BTreeMap<PeerId, MoneyAmount> = BTreeMap::new();
    for t in trades {
        for id in [t.buyer, t.seller] {
            if !peers.contains_key(&id) {
                return Err(TradingError::UnknownPeer(id));
            }
        }
        *owed.entry(t.buyer).or_default() += t.payment_cents;
    }
    for (id, amount) in &owed {
        let balance = peers[id].balance;
        if balance < *amount {
            return Err(TradingError::BalanceUnderflow {
                peer: *id,
                owed: *amount,
                balance,
            });
        }
    }
    for t in trades {
        let buyer = peers.get_mut(&t.buyer).expect("checked");
        buyer.balance = buyer.balance.checked_sub(t.payment_cents).expect("checked");
        peers.get_mut(&t.seller).expect("checked").balance += t.payment_cents;
    }
    Ok(())
}
