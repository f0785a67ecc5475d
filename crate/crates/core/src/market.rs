//! Bulletin board, credit ledger and purchase settlement.
//!
//! The board only ever holds quotes for open tenders. A quote leaves the
//! board in one of two ways: it is taken for purchase (and its passage moves
//! into the buyer's [`BuyerMemory`]) or it is rejected, in which case only a
//! content-free [`RejectionRecord`] survives.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Passage;
use crate::ids::{AgentId, PassageId, QuoteId, TenderId};
use crate::text::content_digest;
use crate::Credits;

#[derive(Debug, Error, PartialEq)]
pub enum MarketError {
    #[error("tender budget {max_budget} exceeds balance {balance} of {buyer}")]
    BudgetExceedsBalance {
        buyer: AgentId,
        max_budget: Credits,
        balance: Credits,
    },
    #[error("unknown tender {0}")]
    UnknownTender(TenderId),
    #[error("tender {0} is closed")]
    TenderClosed(TenderId),
    #[error("unknown quote {0}")]
    UnknownQuote(QuoteId),
    #[error("{buyer} cannot pay {price} with balance {balance}")]
    InsufficientBalance {
        buyer: AgentId,
        price: Credits,
        balance: Credits,
    },
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tender {
    pub id: TenderId,
    pub buyer: AgentId,
    pub query: String,
    pub max_budget: Credits,
    pub round_posted: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub id: QuoteId,
    pub tender_id: TenderId,
    pub vendor: AgentId,
    pub passage: Passage,
    pub price: Credits,
    pub relevance_score: f64,
}

impl Quote {
    /// The quoted price is always the passage's listed price.
    pub fn new(id: QuoteId, tender_id: TenderId, passage: Passage, relevance_score: f64) -> Self {
        Self {
            id,
            tender_id,
            vendor: passage.owner_vendor.clone(),
            price: passage.price,
            passage,
            relevance_score,
        }
    }

    pub fn content(&self) -> &str {
        &self.passage.content
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub buyer: AgentId,
    pub vendor: AgentId,
    pub quote_id: QuoteId,
    pub price: Credits,
    pub round: u32,
}

/// What remains of a rejected quote. Carries a digest of the content so the
/// buyer can refuse to see it again, never the content itself.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub quote_id: QuoteId,
    pub tender_id: TenderId,
    pub passage_id: PassageId,
    pub price: Credits,
    pub round: u32,
    pub content_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    balances: BTreeMap<AgentId, Credits>,
    transactions: Vec<Transaction>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or tops up) an account. Only used when setting up a market.
    pub fn open_account(&mut self, agent: AgentId, balance: Credits) {
        *self.balances.entry(agent).or_default() += balance;
    }

    pub fn balance(&self, agent: &AgentId) -> Credits {
        self.balances.get(agent).copied().unwrap_or(0)
    }

    pub fn balances(&self) -> &BTreeMap<AgentId, Credits> {
        &self.balances
    }

    pub fn transactions(&self) -> &[Transaction] {
        &self.transactions
    }

    pub fn total(&self) -> Credits {
        self.balances.values().sum()
    }

    /// Moves `quote.price` from buyer to vendor and records the transaction.
    /// On error the ledger is unchanged.
    pub fn settle_purchase(
        &mut self,
        buyer: &AgentId,
        quote: &Quote,
        round: u32,
    ) -> Result<Transaction, MarketError> {
        let balance = *self
            .balances
            .get(buyer)
            .ok_or_else(|| MarketError::UnknownAgent(buyer.clone()))?;
        if !self.balances.contains_key(&quote.vendor) {
            return Err(MarketError::UnknownAgent(quote.vendor.clone()));
        }
        if balance < quote.price {
            return Err(MarketError::InsufficientBalance {
                buyer: buyer.clone(),
                price: quote.price,
                balance,
            });
        }
        *self.balances.get_mut(buyer).expect("checked") -= quote.price;
        *self.balances.get_mut(&quote.vendor).expect("checked") += quote.price;
        let tx = Transaction {
            buyer: buyer.clone(),
            vendor: quote.vendor.clone(),
            quote_id: quote.id.clone(),
            price: quote.price,
            round,
        };
        self.transactions.push(tx.clone());
        Ok(tx)
    }

    /// Re-applies a recorded transaction, used when replaying a run.
    pub fn apply(&mut self, tx: &Transaction) -> Result<(), MarketError> {
        let balance = self.balance(&tx.buyer);
        if balance < tx.price {
            return Err(MarketError::InsufficientBalance {
                buyer: tx.buyer.clone(),
                price: tx.price,
                balance,
            });
        }
        *self.balances.entry(tx.buyer.clone()).or_default() -= tx.price;
        *self.balances.entry(tx.vendor.clone()).or_default() += tx.price;
        self.transactions.push(tx.clone());
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct BulletinBoard {
    open_tenders: BTreeMap<TenderId, Tender>,
    closed: BTreeSet<TenderId>,
    quotes_by_tender: BTreeMap<TenderId, Vec<Quote>>,
    issued: BTreeMap<(TenderId, AgentId), usize>,
    rejected: BTreeMap<QuoteId, RejectionRecord>,
    next_tender: u64,
    next_quote: u64,
}

impl BulletinBoard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Posts a tender. The budget may not exceed the buyer's current balance.
    pub fn post_tender(
        &mut self,
        ledger: &Ledger,
        buyer: &AgentId,
        query: &str,
        max_budget: Credits,
        round: u32,
    ) -> Result<TenderId, MarketError> {
        let balance = ledger.balance(buyer);
        if max_budget > balance {
            return Err(MarketError::BudgetExceedsBalance {
                buyer: buyer.clone(),
                max_budget,
                balance,
            });
        }
        self.next_tender += 1;
        let id = TenderId(format!("T{:05}", self.next_tender));
        self.open_tenders.insert(
            id.clone(),
            Tender {
                id: id.clone(),
                buyer: buyer.clone(),
                query: query.to_owned(),
                max_budget,
                round_posted: round,
            },
        );
        self.quotes_by_tender.insert(id.clone(), Vec::new());
        Ok(id)
    }

    pub fn open_tenders(&self) -> impl Iterator<Item = &Tender> {
        self.open_tenders.values()
    }

    pub fn tender(&self, id: &TenderId) -> Option<&Tender> {
        self.open_tenders.get(id)
    }

    pub fn next_quote_id(&mut self) -> QuoteId {
        self.next_quote += 1;
        QuoteId(format!("Q{:06}", self.next_quote))
    }

    /// Appends a quote. Returns `Ok(false)` without touching the board when the
    /// vendor already issued `per_tender_limit` quotes for this tender.
    pub fn submit_quote(
        &mut self,
        quote: Quote,
        per_tender_limit: usize,
    ) -> Result<bool, MarketError> {
        self.check_open(&quote.tender_id)?;
        let key = (quote.tender_id.clone(), quote.vendor.clone());
        let issued = self.issued.get(&key).copied().unwrap_or(0);
        if issued >= per_tender_limit {
            return Ok(false);
        }
        self.issued.insert(key, issued + 1);
        self.quotes_by_tender
            .get_mut(&quote.tender_id)
            .expect("open tender has a quote list")
            .push(quote);
        Ok(true)
    }

    pub fn quotes(&self, tender: &TenderId) -> &[Quote] {
        self.quotes_by_tender
            .get(tender)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Number of quotes `vendor` has issued for `tender`, including ones
    /// already taken or rejected.
    pub fn issued_count(&self, tender: &TenderId, vendor: &AgentId) -> usize {
        self.issued
            .get(&(tender.clone(), vendor.clone()))
            .copied()
            .unwrap_or(0)
    }

    /// Removes a quote from the board for purchase.
    pub fn take_quote(&mut self, id: &QuoteId) -> Result<Quote, MarketError> {
        for quotes in self.quotes_by_tender.values_mut() {
            if let Some(pos) = quotes.iter().position(|q| &q.id == id) {
                return Ok(quotes.remove(pos));
            }
        }
        Err(MarketError::UnknownQuote(id.clone()))
    }

    /// Erases a quote's content from the board. Rejecting an already-rejected
    /// quote is a no-op returning `Ok(None)`.
    pub fn reject_quote(
        &mut self,
        id: &QuoteId,
        round: u32,
    ) -> Result<Option<RejectionRecord>, MarketError> {
        if self.rejected.contains_key(id) {
            return Ok(None);
        }
        let quote = self.take_quote(id)?;
        let record = RejectionRecord {
            quote_id: quote.id.clone(),
            tender_id: quote.tender_id.clone(),
            passage_id: quote.passage.id.clone(),
            price: quote.price,
            round,
            content_digest: content_digest(&quote.passage.content),
        };
        self.rejected.insert(id.clone(), record.clone());
        Ok(Some(record))
    }

    pub fn rejections(&self) -> impl Iterator<Item = &RejectionRecord> {
        self.rejected.values()
    }

    /// Closes a tender. Any quotes still attached are returned so the caller
    /// can reject them; the board keeps none of them.
    pub fn close_tender(&mut self, id: &TenderId) -> Result<Vec<Quote>, MarketError> {
        self.check_open(id)?;
        self.open_tenders.remove(id);
        self.closed.insert(id.clone());
        Ok(self.quotes_by_tender.remove(id).unwrap_or_default())
    }

    /// Every passage body currently visible on the board.
    pub fn visible_contents(&self) -> impl Iterator<Item = &str> {
        self.quotes_by_tender
            .values()
            .flatten()
            .map(|q| q.passage.content.as_str())
    }

    fn check_open(&self, id: &TenderId) -> Result<(), MarketError> {
        if self.open_tenders.contains_key(id) {
            Ok(())
        } else if self.closed.contains(id) {
            Err(MarketError::TenderClosed(id.clone()))
        } else {
            Err(MarketError::UnknownTender(id.clone()))
        }
    }
}

/// What a buyer agent retains: purchased passages, plus digests of content it
/// has already seen and forgotten or already owns.
#[derive(Clone, Debug, Default)]
pub struct BuyerMemory {
    owned: BTreeMap<PassageId, Passage>,
    owned_digests: BTreeSet<String>,
    rejected_digests: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub owned: Vec<Passage>,
    pub forgotten: usize,
}

impl BuyerMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn own(&mut self, passage: Passage) {
        self.owned_digests.insert(content_digest(&passage.content));
        self.owned.insert(passage.id.clone(), passage);
    }

    pub fn forget(&mut self, record: &RejectionRecord) {
        self.rejected_digests.insert(record.content_digest.clone());
    }

    pub fn owns_content(&self, content: &str) -> bool {
        self.owned_digests.contains(&content_digest(content))
    }

    /// Whether a freshly received quote may be shown to the buyer at all:
    /// content it already owns or has already rejected is withheld.
    pub fn admits(&self, quote: &Quote) -> bool {
        let digest = content_digest(&quote.passage.content);
        !self.owned_digests.contains(&digest) && !self.rejected_digests.contains(&digest)
    }

    pub fn owned(&self) -> impl Iterator<Item = &Passage> {
        self.owned.values()
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            owned: self.owned.values().cloned().collect(),
            forgotten: self.rejected_digests.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passage(id: &str, vendor: &str, price: Credits, content: &str) -> Passage {
        Passage {
            id: id.into(),
            paper_title: format!("paper {id}"),
            section_title: "intro".into(),
            content: content.into(),
            price,
            owner_vendor: vendor.into(),
            first_author_mean_citations: 0.0,
        }
    }

    fn market(buyer_balance: Credits) -> (BulletinBoard, Ledger, AgentId) {
        let mut ledger = Ledger::new();
        let buyer = AgentId::new("buyer");
        ledger.open_account(buyer.clone(), buyer_balance);
        ledger.open_account("v1".into(), 0);
        (BulletinBoard::new(), ledger, buyer)
    }

    #[test]
    fn tender_budget_boundary() {
        let (mut board, ledger, buyer) = market(100);
        assert!(board.post_tender(&ledger, &buyer, "q", 100, 0).is_ok());
        let (mut board2, ledger2, buyer2) = market(50);
        assert!(matches!(
            board2.post_tender(&ledger2, &buyer2, "q", 60, 0),
            Err(MarketError::BudgetExceedsBalance { .. })
        ));
        let t2 = board.post_tender(&ledger, &buyer, "other", 10, 0).unwrap();
        assert_eq!(board.open_tenders().count(), 2);
        assert!(board.tender(&t2).is_some());
    }

    #[test]
    fn quote_limit_is_enforced_silently() {
        let (mut board, ledger, buyer) = market(100);
        let t = board.post_tender(&ledger, &buyer, "q", 100, 0).unwrap();
        for i in 0..3 {
            let id = board.next_quote_id();
            let q = Quote::new(id, t.clone(), passage(&format!("p{i}"), "v1", 5, "x"), 0.5);
            assert!(board.submit_quote(q, 3).unwrap());
        }
        let id = board.next_quote_id();
        let fourth = Quote::new(id, t.clone(), passage("p9", "v1", 5, "y"), 0.5);
        assert!(!board.submit_quote(fourth, 3).unwrap());
        assert_eq!(board.quotes(&t).len(), 3);

        board.close_tender(&t).unwrap();
        let id = board.next_quote_id();
        let late = Quote::new(id, t.clone(), passage("p8", "v1", 5, "z"), 0.5);
        assert_eq!(
            board.submit_quote(late, 3),
            Err(MarketError::TenderClosed(t))
        );
    }

    #[test]
    fn settlement_moves_credits() {
        let (mut board, mut ledger, buyer) = market(100);
        let t = board.post_tender(&ledger, &buyer, "q", 100, 0).unwrap();
        let q = Quote::new(board.next_quote_id(), t.clone(), passage("p", "v1", 10, "c"), 0.9);
        let tx = ledger.settle_purchase(&buyer, &q, 0).unwrap();
        assert_eq!(tx.price, 10);
        assert_eq!(ledger.balance(&buyer), 90);
        assert_eq!(ledger.balance(&"v1".into()), 10);

        let free = Quote::new(board.next_quote_id(), t.clone(), passage("f", "v1", 0, "d"), 0.9);
        ledger.settle_purchase(&buyer, &free, 0).unwrap();
        assert_eq!(ledger.balance(&buyer), 90);
        assert_eq!(ledger.transactions().len(), 2);
    }

    #[test]
    fn insufficient_balance_leaves_ledger_unchanged() {
        let (mut board, mut ledger, buyer) = market(5);
        let t = board.post_tender(&ledger, &buyer, "q", 5, 0).unwrap();
        let q = Quote::new(board.next_quote_id(), t, passage("p", "v1", 10, "c"), 0.9);
        let before = ledger.clone();
        assert!(ledger.settle_purchase(&buyer, &q, 0).is_err());
        assert_eq!(ledger, before);
    }

    #[test]
    fn rejection_forgets_content_and_is_idempotent() {
        let (mut board, ledger, buyer) = market(100);
        let t = board.post_tender(&ledger, &buyer, "q", 100, 0).unwrap();
        let secret = "the secret passage text";
        let qid = board.next_quote_id();
        board
            .submit_quote(Quote::new(qid.clone(), t.clone(), passage("p", "v1", 7, secret), 0.4), 3)
            .unwrap();
        let mut memory = BuyerMemory::new();
        let rec = board.reject_quote(&qid, 0).unwrap().unwrap();
        memory.forget(&rec);
        assert_eq!(rec.price, 7);
        assert!(board.visible_contents().all(|c| !c.contains(secret)));
        let dump = serde_json::to_string(&memory.snapshot()).unwrap();
        assert!(!dump.contains(secret));
        assert!(!serde_json::to_string(&rec).unwrap().contains(secret));

        assert_eq!(board.reject_quote(&qid, 0), Ok(None));
        assert!(matches!(
            board.reject_quote(&"Q999999".into(), 0),
            Err(MarketError::UnknownQuote(_))
        ));

        let again = Quote::new(board.next_quote_id(), t, passage("p2", "v1", 3, secret), 0.4);
        assert!(!memory.admits(&again));
    }
}
