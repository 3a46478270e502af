//! Escrow contract state machine.
//!
//! Deployed -> Funded -> Delivered -> Settled, or any pre-Settled state ->
//! Refunded once the deadline for the next step has passed. Deadlines are
//! inclusive: an action at tick `t <= deadline` is on time.

use std::collections::BTreeMap;

use crate::crypto::Address;

use super::tx::{ContractId, EscrowTerms, TxId};
use super::LedgerError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContractState {
    Deployed,
    Funded,
    Delivered,
    Settled,
    Refunded,
}

impl std::fmt::Display for ContractState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EscrowContract {
    pub id: ContractId,
    pub terms: EscrowTerms,
    pub state: ContractState,
    /// Tokens currently frozen in the contract.
    pub balance: u64,
    /// TX_u recorded against this contract, if any.
    pub transfer: Option<TxId>,
}

pub(crate) type Balances = BTreeMap<Address, u64>;

impl EscrowContract {
    pub(crate) fn deploy(id: ContractId, terms: EscrowTerms) -> Result<Self, LedgerError> {
        if terms.price == 0 {
            return Err(LedgerError::InvalidTerms("price must be positive"));
        }
        if terms.seller == terms.buyer {
            return Err(LedgerError::InvalidTerms("seller and buyer must differ"));
        }
        if !(terms.pay_deadline <= terms.deliver_deadline
            && terms.deliver_deadline <= terms.confirm_deadline)
        {
            return Err(LedgerError::InvalidTerms(
                "deadlines must satisfy pay <= deliver <= confirm",
            ));
        }
        Ok(Self {
            id,
            terms,
            state: ContractState::Deployed,
            balance: 0,
            transfer: None,
        })
    }

    fn require(&self, state: ContractState) -> Result<(), LedgerError> {
        if self.state == state {
            Ok(())
        } else {
            Err(LedgerError::WrongContractState(self.state))
        }
    }

    fn on_time(tick: u64, deadline: u64) -> Result<(), LedgerError> {
        if tick <= deadline {
            Ok(())
        } else {
            Err(LedgerError::DeadlinePassed)
        }
    }

    pub(crate) fn check_fund(
        &self,
        sender: Address,
        amount: u64,
        tick: u64,
        balances: &Balances,
    ) -> Result<(), LedgerError> {
        if sender != self.terms.buyer {
            return Err(LedgerError::Unauthorized);
        }
        self.require(ContractState::Deployed)?;
        Self::on_time(tick, self.terms.pay_deadline)?;
        if amount != self.terms.price {
            return Err(LedgerError::AmountMismatch {
                expected: self.terms.price,
                got: amount,
            });
        }
        if balances.get(&sender).copied().unwrap_or(0) < amount {
            return Err(LedgerError::InsufficientFunds);
        }
        Ok(())
    }

    pub(crate) fn apply_fund(&mut self, balances: &mut Balances) {
        let buyer = balances.get_mut(&self.terms.buyer).expect("checked");
        *buyer -= self.terms.price;
        self.balance = self.terms.price;
        self.state = ContractState::Funded;
    }

    pub(crate) fn check_deliver(&self, tick: u64) -> Result<(), LedgerError> {
        self.require(ContractState::Funded)?;
        Self::on_time(tick, self.terms.deliver_deadline)
    }

    pub(crate) fn apply_deliver(&mut self, transfer: TxId) {
        self.transfer = Some(transfer);
        self.state = ContractState::Delivered;
    }

    pub(crate) fn check_confirm(&self, sender: Address, tick: u64) -> Result<(), LedgerError> {
        if sender != self.terms.buyer {
            return Err(LedgerError::Unauthorized);
        }
        self.require(ContractState::Delivered)?;
        Self::on_time(tick, self.terms.confirm_deadline)
    }

    pub(crate) fn apply_confirm(&mut self, balances: &mut Balances) {
        *balances.entry(self.terms.seller).or_insert(0) += self.balance;
        self.balance = 0;
        self.state = ContractState::Settled;
    }

    /// The deadline whose passage unlocks a refund from the current state.
    pub fn refund_deadline(&self) -> Option<u64> {
        match self.state {
            ContractState::Deployed => Some(self.terms.pay_deadline),
            ContractState::Funded => Some(self.terms.deliver_deadline),
            ContractState::Delivered => Some(self.terms.confirm_deadline),
            ContractState::Settled | ContractState::Refunded => None,
        }
    }

    pub(crate) fn check_refund(&self, sender: Address, tick: u64) -> Result<(), LedgerError> {
        if sender != self.terms.buyer && sender != self.terms.seller {
            return Err(LedgerError::Unauthorized);
        }
        let deadline = self
            .refund_deadline()
            .ok_or(LedgerError::WrongContractState(self.state))?;
        if tick <= deadline {
            return Err(LedgerError::DeadlineNotReached { deadline, tick });
        }
        Ok(())
    }

    /// Returns the voided TX_u when refunding a delivered contract.
    pub(crate) fn apply_refund(&mut self, balances: &mut Balances) -> Option<TxId> {
        *balances.entry(self.terms.buyer).or_insert(0) += self.balance;
        self.balance = 0;
        let voided = match self.state {
            ContractState::Delivered => self.transfer,
            _ => None,
        };
        self.state = ContractState::Refunded;
        voided
    }
}
