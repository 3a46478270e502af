pub mod crypto;
pub mod error;
pub mod ledger;
pub mod protocol;
pub mod puf;
pub mod watermark;
