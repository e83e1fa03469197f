//! Reference class forecasting of firm sales growth.

pub mod pca_engine;
pub mod panel_store;
pub mod selection;
pub mod stats_core;
pub mod calibration;
pub mod forecast;
pub mod synthgen;
pub mod backtest;
pub mod cli;
