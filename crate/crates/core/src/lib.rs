//! Multivariate multi-horizon quantile forecasting for sparsely sampled
//! clinical time series.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod importance;
pub mod metrics;
pub mod objective;
pub mod params;
pub mod scenarios;
pub mod service;
pub mod synthdata;
pub mod tape;
pub mod tft;
pub mod timegrid;
pub mod trainer;
