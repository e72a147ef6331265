//! Bernoulli-dropout Bayesian convolutional networks, desk scale.
//!
//! Training a dropout network by stochastic gradient descent is, up to a
//! constant, stochastic variational inference over a Bernoulli factor on the
//! network weights.  This crate implements that correspondence end to end:
//! a small deterministic tensor library, counter-based mask sampling, a
//! convolutional network core with exact gradients, the regularised dropout
//! training objective, two prediction rules (weight averaging vs. Monte Carlo
//! averaging of sampled-mask passes), and an experiment CLI that trains
//! LeNet variants on MNIST and writes run metrics as CSV.
//!
//! Everything that touches floating point uses fixed summation orders and
//! counter-based random streams, so a run is reproducible bit for bit from
//! `(seed, config)` alone.

pub mod bayes;
pub mod cli;
pub mod data;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
