//! Synaptic-operation accounting and the 45 nm energy model.
//!
//! A layer's SOP count is `R · T · FLOPs`, where `FLOPs` is the work of one
//! time step at full density and `R` the fraction of its input spike slots
//! that fire. The first convolution reads real-valued frames and is charged
//! per multiply-accumulate; every other layer is charged per accumulate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{batch_samples, Model};
use crate::nn::Session;
use crate::tensor::Tensor;

pub const E_MAC_PJ: f64 = 4.6;
pub const E_AC_PJ: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self { e_mac_pj: E_MAC_PJ, e_ac_pj: E_AC_PJ }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Mac,
    Ac,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub name: String,
    /// Per time step, at full density.
    pub flops: u64,
    pub firing_rate: f64,
    pub time_steps: usize,
    pub kind: OpKind,
}

impl LayerProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.firing_rate) {
            return Err(Error::Domain {
                op: "layer_profile",
                detail: format!("{}: firing rate {} outside [0, 1]", self.name, self.firing_rate),
            });
        }
        Ok(())
    }

    pub fn sop(&self) -> f64 {
        sop(self.firing_rate, self.time_steps, self.flops)
    }
}

pub fn sop(firing_rate: f64, time_steps: usize, flops: u64) -> f64 {
    firing_rate * time_steps as f64 * flops as f64
}

pub fn conv_flops(k: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
    2 * (k * k * c_in * c_out * h_out * w_out) as u64
}

pub fn linear_flops(c_in: usize, c_out: usize) -> u64 {
    2 * (c_in * c_out) as u64
}

/// Spiking attention over `tokens` positions for one time step.
pub fn attention_flops(tokens: usize, head_dim: usize, heads: usize) -> u64 {
    2 * (tokens * tokens * head_dim) as u64 * 2 * heads as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub kind: OpKind,
    pub flops: u64,
    #[serde(rename = "R")]
    pub firing_rate: f64,
    pub sop: f64,
    #[serde(rename = "pJ")]
    pub pj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub constants: EnergyConstants,
    pub layers: Vec<LayerEnergy>,
    pub mac_pj: f64,
    pub ac_pj: f64,
    pub total_pj: f64,
    pub total_mj: f64,
}

/// `e_mac · FLOPs(first conv) + e_ac · Σ SOP`, summed in layer order.
pub fn total_energy(profiles: &[LayerProfile], constants: &EnergyConstants) -> Result<EnergyReport> {
    if !(constants.e_mac_pj > 0.0 && constants.e_ac_pj > 0.0) {
        return Err(Error::Domain { op: "total_energy", detail: format!("non-positive constants {constants:?}") });
    }
    let macs = profiles.iter().filter(|p| p.kind == OpKind::Mac).count();
    if macs != 1 {
        return Err(Error::Config(format!("expected exactly one MAC layer, found {macs}")));
    }
    let mut layers = Vec::with_capacity(profiles.len());
    let (mut mac_pj, mut sops) = (0.0, 0.0);
    for p in profiles {
        p.validate()?;
        let (sop, pj) = match p.kind {
            OpKind::Mac => {
                let pj = constants.e_mac_pj * p.flops as f64;
                mac_pj += pj;
                (0.0, pj)
            }
            OpKind::Ac => {
                let sop = p.sop();
                sops += sop;
                (sop, constants.e_ac_pj * sop)
            }
        };
        layers.push(LayerEnergy { name: p.name.clone(), kind: p.kind, flops: p.flops, firing_rate: p.firing_rate, sop, pj });
    }
    let ac_pj = constants.e_ac_pj * sops;
    let total_pj = mac_pj + ac_pj;
    Ok(EnergyReport { constants: *constants, layers, mac_pj, ac_pj, total_pj, total_mj: total_pj * 1e-9 })
}

/// Fraction of slots holding a spike.
pub fn spike_rate(spikes: &[f32]) -> f64 {
    if spikes.is_empty() {
        return 0.0;
    }
    spikes.iter().map(|&v| f64::from(v)).sum::<f64>() / spikes.len() as f64
}

/// Fraction of firing slots per probed site over all `samples`, each
/// `[T, C, H, W]`. Samples are run in eval mode in batches of `batch`.
pub fn firing_rates(model: &Model, samples: &[Tensor], batch: usize) -> Result<Vec<(String, f64)>> {
    if samples.is_empty() || batch == 0 {
        return Err(Error::Domain { op: "firing_rates", detail: "need at least one sample and a positive batch".into() });
    }
    let mut order: Vec<String> = Vec::new();
    let mut totals: HashMap<String, (f64, u64)> = HashMap::new();
    for chunk in samples.chunks(batch) {
        let x = batch_samples(chunk)?;
        let mut s = Session::new(&model.store, false);
        s.record_spikes();
        let xv = s.tape.constant(x);
        model.forward(&mut s, xv)?;
        for p in s.probes() {
            let data = s.tape.data(p.spikes);
            let fired: f64 = data.iter().map(|&v| f64::from(v)).sum();
            let entry = totals.entry(p.name.clone()).or_insert_with(|| {
                order.push(p.name.clone());
                (0.0, 0)
            });
            entry.0 += fired;
            entry.1 += data.len() as u64;
        }
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let (fired, slots) = totals[&name];
            (name, fired / slots as f64)
        })
        .collect())
}

/// The stem as the MAC layer, then one AC layer per spiking site with its
/// measured firing rate.
pub fn profile_model(model: &Model, samples: &[Tensor], batch: usize) -> Result<Vec<LayerProfile>> {
    let t = model.config.time_steps;
    let rates: HashMap<String, f64> = firing_rates(model, samples, batch)?.into_iter().collect();
    let mut out = vec![LayerProfile {
        name: "stem".into(),
        flops: model.stem_flops() / t as u64,
        firing_rate: 1.0,
        time_steps: t,
        kind: OpKind::Mac,
    }];
    for site in model.sites() {
        let rate = *rates
            .get(&site.probe)
            .ok_or_else(|| Error::Config(format!("no spikes recorded for site {}", site.probe)))?;
        out.push(LayerProfile {
            name: site.probe,
            flops: site.flops / t as u64,
            firing_rate: rate,
            time_steps: t,
            kind: OpKind::Ac,
        });
    }
    Ok(out)
}

pub fn energy_report(model: &Model, samples: &[Tensor], constants: &EnergyConstants) -> Result<EnergyReport> {
    total_energy(&profile_model(model, samples, 16)?, constants)
}
