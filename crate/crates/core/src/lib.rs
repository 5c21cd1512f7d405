//! Joint handover and radio-resource management for a cellular-connected
//! drone, learned with tabular Q-learning and compared against an RSS
//! handover benchmark.
//!
//! The crate is layered bottom-up: [`channel`] (air-to-ground propagation),
//! [`traffic`] (uplink buffer), [`link`] (rate and interference), [`env`]
//! (the MDP), [`agent`] (Q-learning), [`baseline`], [`kpi`], and the
//! experiment driver in [`config`], [`sim`] and [`commands`].

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod baseline;
pub mod channel;
pub mod commands;
pub mod config;
pub mod env;
pub mod kpi;
pub mod link;
pub mod rng;
pub mod sim;
pub mod traffic;
