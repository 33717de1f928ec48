//! Donation token economy: tokens are minted for donated energy and burned
//! to vote on who may receive donations.
//!
//! Every state change goes through [`Governance::apply`] and is appended to
//! the event log, so the log alone rebuilds the state via [`Governance::replay`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::donation::{DonationEvent, DonationSource};
use crate::model::PeerId;
use crate::quantity::div_round_half_up;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GovernanceError {
    #[error("{voter} holds {balance} tokens, cannot burn {burn}")]
    InsufficientBalance { voter: Account, balance: u64, burn: u64 },
    #[error("vote must burn at least one token")]
    ZeroBurn,
    #[error("proposal {0} is not open")]
    NotOpen(ProposalId),
    #[error("proposal {0} already resolved")]
    AlreadyResolved(ProposalId),
    #[error("proposal {proposal} closes at {closes_at}, now {now}")]
    NotYetClosed { proposal: ProposalId, closes_at: u32, now: u32 },
    #[error("unknown proposal {0}")]
    UnknownProposal(ProposalId),
    #[error("proposal ids must be sequential: expected {expected}, got {got}")]
    OutOfSequence { expected: ProposalId, got: ProposalId },
    #[error("invalid account `{0}`")]
    InvalidAccount(String),
    #[error("token supply {supply} does not match balances {balances} / records {records}")]
    SupplyMismatch { supply: u64, balances: u64, records: u64 },
    #[error("bad governance log line {line}: {message}")]
    BadLog { line: usize, message: String },
}

/// Token holder: a community peer or the aggregate of external money donors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Account {
    Peer(PeerId),
    ExternalDonors,
}

impl fmt::Display for Account {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Account::Peer(id) => write!(f, "peer:{id}"),
            Account::ExternalDonors => f.write_str("external"),
        }
    }
}

impl FromStr for Account {
    type Err = GovernanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "external" {
            return Ok(Account::ExternalDonors);
        }
        s.strip_prefix("peer:")
            .and_then(|id| id.parse().ok())
            .map(|id| Account::Peer(PeerId(id)))
            .ok_or_else(|| GovernanceError::InvalidAccount(s.to_string()))
    }
}

impl Serialize for Account {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Account {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProposalId(pub u32);

impl fmt::Display for ProposalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TokenRecord {
    Mint {
        account: Account,
        amount: u64,
        timestep: u32,
        donation_index: usize,
    },
    Burn {
        account: Account,
        amount: u64,
        proposal: ProposalId,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    balances: BTreeMap<Account, u64>,
    total_supply: u64,
    records: Vec<TokenRecord>,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn balance(&self, account: Account) -> u64 {
        self.balances.get(&account).copied().unwrap_or(0)
    }

    pub fn balances(&self) -> &BTreeMap<Account, u64> {
        &self.balances
    }

    pub fn total_supply(&self) -> u64 {
        self.total_supply
    }

    pub fn records(&self) -> &[TokenRecord] {
        &self.records
    }

    fn mint(&mut self, account: Account, amount: u64, timestep: u32, donation_index: usize) {
        *self.balances.entry(account).or_default() += amount;
        self.total_supply += amount;
        self.records.push(TokenRecord::Mint {
            account,
            amount,
            timestep,
            donation_index,
        });
    }

    fn burn(&mut self, account: Account, amount: u64, proposal: ProposalId) -> Result<(), GovernanceError> {
        let balance = self.balance(account);
        if amount == 0 {
            return Err(GovernanceError::ZeroBurn);
        }
        if balance < amount {
            return Err(GovernanceError::InsufficientBalance {
                voter: account,
                balance,
                burn: amount,
            });
        }
        self.balances.insert(account, balance - amount);
        self.total_supply -= amount;
        self.records.push(TokenRecord::Burn {
            account,
            amount,
            proposal,
        });
        Ok(())
    }

    /// `total_supply == sum(balances) == sum(mints) - sum(burns)`.
    pub fn check_supply(&self) -> Result<(), GovernanceError> {
        let balances: u64 = self.balances.values().sum();
        let records = self.records.iter().fold(0i128, |acc, r| match r {
            TokenRecord::Mint { amount, .. } => acc + *amount as i128,
            TokenRecord::Burn { amount, .. } => acc - *amount as i128,
        });
        if balances != self.total_supply || records != self.total_supply as i128 {
            return Err(GovernanceError::SupplyMismatch {
                supply: self.total_supply,
                balances,
                records: records.max(0) as u64,
            });
        }
        Ok(())
    }
}

/// Tokens earned for one donation event at `tokens_per_kwh`, rounded half-up.
/// Direct donations credit the donating prosumer; funded ones credit the
/// external donors' account.
pub fn tokens_for(event: &DonationEvent, tokens_per_kwh: u64) -> (Account, u64) {
    let account = match (event.source, event.supplier) {
        (DonationSource::PeerDirect, Some(peer)) => Account::Peer(peer),
        _ => Account::ExternalDonors,
    };
    let amount = div_round_half_up(event.quantity_wh.0 as u128 * tokens_per_kwh as u128, 1000);
    (account, amount as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalStatus {
    Open,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteDirection {
    For,
    Against,
}

/// A vote on whether `subject` may receive donations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityProposal {
    pub id: ProposalId,
    pub subject: PeerId,
    pub status: ProposalStatus,
    pub votes_for: u64,
    pub votes_against: u64,
    pub quorum: u64,
    pub opened_at: u32,
    pub closes_at: u32,
}

impl EligibilityProposal {
    pub fn new(id: ProposalId, subject: PeerId, opened_at: u32, closes_at: u32, quorum: u64) -> Self {
        Self {
            id,
            subject,
            status: ProposalStatus::Open,
            votes_for: 0,
            votes_against: 0,
            quorum,
            opened_at,
            closes_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub voter: Account,
    pub proposal: ProposalId,
    pub direction: VoteDirection,
    pub burn_amount: u64,
}

/// Burns the voter's tokens and adds them to the chosen tally. On error
/// neither the ledger nor the proposal changes.
pub fn cast_vote(
    ledger: &mut TokenLedger,
    proposal: &mut EligibilityProposal,
    vote: &Vote,
) -> Result<(), GovernanceError> {
    if proposal.status != ProposalStatus::Open {
        return Err(GovernanceError::NotOpen(proposal.id));
    }
    ledger.burn(vote.voter, vote.burn_amount, proposal.id)?;
    match vote.direction {
        VoteDirection::For => proposal.votes_for += vote.burn_amount,
        VoteDirection::Against => proposal.votes_against += vote.burn_amount,
    }
    Ok(())
}

/// Approved iff the burned weight for exceeds the weight against and the
/// total meets the quorum. Ties reject.
pub fn resolve(proposal: &mut EligibilityProposal, now: u32) -> Result<ProposalStatus, GovernanceError> {
    if proposal.status != ProposalStatus::Open {
        return Err(GovernanceError::AlreadyResolved(proposal.id));
    }
    if now < proposal.closes_at {
        return Err(GovernanceError::NotYetClosed {
            proposal: proposal.id,
            closes_at: proposal.closes_at,
            now,
        });
    }
    let turnout = proposal.votes_for + proposal.votes_against;
    proposal.status = if proposal.votes_for > proposal.votes_against && turnout >= proposal.quorum {
        ProposalStatus::Approved
    } else {
        ProposalStatus::Rejected
    };
    Ok(proposal.status)
}

/// One line of the governance log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GovernanceEvent {
    Mint {
        timestep: u32,
        donation_index: usize,
        account: Account,
        amount: u64,
    },
    Propose {
        timestep: u32,
        proposal: ProposalId,
        subject: PeerId,
        closes_at: u32,
        quorum: u64,
    },
    Vote {
        timestep: u32,
        proposal: ProposalId,
        voter: Account,
        direction: VoteDirection,
        burn: u64,
    },
    Resolve {
        timestep: u32,
        proposal: ProposalId,
        status: ProposalStatus,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Governance {
    tokens: TokenLedger,
    proposals: Vec<EligibilityProposal>,
    #[serde(skip)]
    log: Vec<GovernanceEvent>,
}

impl Governance {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tokens(&self) -> &TokenLedger {
        &self.tokens
    }

    pub fn proposals(&self) -> &[EligibilityProposal] {
        &self.proposals
    }

    pub fn proposal(&self, id: ProposalId) -> Option<&EligibilityProposal> {
        self.proposals.get(id.0 as usize)
    }

    pub fn log(&self) -> &[GovernanceEvent] {
        &self.log
    }

    pub fn is_approved(&self, subject: PeerId) -> bool {
        self.proposals
            .iter()
            .any(|p| p.subject == subject && p.status == ProposalStatus::Approved)
    }

    pub fn has_proposal_for(&self, subject: PeerId) -> bool {
        self.proposals.iter().any(|p| p.subject == subject)
    }

    /// Mints tokens for a donation event. Events worth less than half a
    /// token mint nothing and leave no record.
    pub fn mint_on_donation(
        &mut self,
        event: &DonationEvent,
        donation_index: usize,
        tokens_per_kwh: u64,
    ) -> Option<(Account, u64)> {
        let (account, amount) = tokens_for(event, tokens_per_kwh);
        if amount == 0 {
            return None;
        }
        self.apply(GovernanceEvent::Mint {
            timestep: event.timestep,
            donation_index,
            account,
            amount,
        })
        .expect("mint cannot fail");
        Some((account, amount))
    }

    pub fn open_proposal(&mut self, subject: PeerId, opened_at: u32, closes_at: u32, quorum: u64) -> ProposalId {
        let id = ProposalId(self.proposals.len() as u32);
        self.apply(GovernanceEvent::Propose {
            timestep: opened_at,
            proposal: id,
            subject,
            closes_at,
            quorum,
        })
        .expect("sequential id");
        id
    }

    pub fn cast_vote(&mut self, vote: &Vote, now: u32) -> Result<(), GovernanceError> {
        self.apply(GovernanceEvent::Vote {
            timestep: now,
            proposal: vote.proposal,
            voter: vote.voter,
            direction: vote.direction,
            burn: vote.burn_amount,
        })
    }

    pub fn resolve(&mut self, id: ProposalId, now: u32) -> Result<ProposalStatus, GovernanceError> {
        let proposal = self.proposals.get(id.0 as usize).ok_or(GovernanceError::UnknownProposal(id))?;
        let mut probe = proposal.clone();
        let status = resolve(&mut probe, now)?;
        self.apply(GovernanceEvent::Resolve {
            timestep: now,
            proposal: id,
            status,
        })?;
        Ok(status)
    }

    /// Resolves every open proposal whose voting window has ended.
    pub fn resolve_due(&mut self, now: u32) -> Vec<(ProposalId, ProposalStatus)> {
        let due: Vec<ProposalId> = self
            .proposals
            .iter()
            .filter(|p| p.status == ProposalStatus::Open && p.closes_at <= now)
            .map(|p| p.id)
            .collect();
        due.into_iter()
            .map(|id| (id, self.resolve(id, now).expect("due proposal resolves")))
            .collect()
    }

    /// Validates and applies one event, appending it to the log on success.
    pub fn apply(&mut self, event: GovernanceEvent) -> Result<(), GovernanceError> {
        match &event {
            GovernanceEvent::Mint {
                timestep,
                donation_index,
                account,
                amount,
            } => self.tokens.mint(*account, *amount, *timestep, *donation_index),
            GovernanceEvent::Propose {
                timestep,
                proposal,
                subject,
                closes_at,
                quorum,
            } => {
                let expected = ProposalId(self.proposals.len() as u32);
                if *proposal != expected {
                    return Err(GovernanceError::OutOfSequence {
                        expected,
                        got: *proposal,
                    });
                }
                self.proposals
                    .push(EligibilityProposal::new(*proposal, *subject, *timestep, *closes_at, *quorum));
            }
            GovernanceEvent::Vote {
                timestep,
                proposal,
                voter,
                direction,
                burn,
            } => {
                let p = self
                    .proposals
                    .get_mut(proposal.0 as usize)
                    .ok_or(GovernanceError::UnknownProposal(*proposal))?;
                if *timestep >= p.closes_at {
                    return Err(GovernanceError::NotOpen(*proposal));
                }
                let vote = Vote {
                    voter: *voter,
                    proposal: *proposal,
                    direction: *direction,
                    burn_amount: *burn,
                };
                cast_vote(&mut self.tokens, p, &vote)?;
            }
            GovernanceEvent::Resolve {
                timestep,
                proposal,
                status,
            } => {
                let p = self
                    .proposals
                    .get_mut(proposal.0 as usize)
                    .ok_or(GovernanceError::UnknownProposal(*proposal))?;
                let mut probe = p.clone();
                let got = resolve(&mut probe, *timestep)?;
                if got != *status {
                    return Err(GovernanceError::BadLog {
                        line: self.log.len(),
                        message: format!("resolve of {proposal} yields {got:?}, log says {status:?}"),
                    });
                }
                *p = probe;
            }
        }
        self.log.push(event);
        Ok(())
    }

    pub fn replay(events: &[GovernanceEvent]) -> Result<Self, GovernanceError> {
        let mut g = Self::new();
        for e in events {
            g.apply(e.clone())?;
        }
        Ok(g)
    }

    /// The log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<GovernanceEvent>, GovernanceError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| GovernanceError::BadLog {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }

    /// Canonical JSON of balances, supply, records and proposals.
    pub fn state_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}
