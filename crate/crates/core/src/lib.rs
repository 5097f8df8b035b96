pub mod canonical;
pub mod crypto;
pub mod digest;
pub mod schedule;
pub mod statistics;
pub mod dataset;
pub mod oracle;
pub mod evidence;
pub mod ledger;
pub mod protocol;
pub mod simulate;
