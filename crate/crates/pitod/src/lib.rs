//! Policy iteration with turn-over dropout.
//!
//! Trains a masked-ensemble soft actor-critic agent in which every
//! experience group owns a deterministic dropout mask, estimates each
//! group's influence on policy evaluation, policy improvement, return,
//! and Q-estimation bias by evaluating the flipped mask — no retraining —
//! amends underperforming agents by deleting negatively influential
//! groups, and validates the estimates against a leave-one-out retraining
//! oracle at small scale.

pub mod agent;
pub mod approx;
pub mod env;
pub mod mask;
pub mod replay;
pub mod seeds;
