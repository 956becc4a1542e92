use serde::{Deserialize, Serialize};

/// Synthetic training loss: `l_final + (l_ini - l_final) * exp(-kappa * t)`
/// after `t` completed iterations, or values from a recorded trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossModel {
    pub l_ini: f64,
    pub l_final: f64,
    pub kappa: f64,
    /// Loss after iteration 0, 1, ...; overrides the curve where present.
    pub trace: Option<Vec<f64>>,
}

impl Default for LossModel {
    fn default() -> Self {
        Self {
            l_ini: 10.0,
            l_final: 2.0,
            kappa: 0.1,
            trace: None,
        }
    }
}

impl LossModel {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.l_final > 0.0 && self.l_ini >= self.l_final) {
            v.push(format!(
                "loss needs l_ini >= l_final > 0, got {} / {}",
                self.l_ini, self.l_final
            ));
        }
        if !(self.kappa > 0.0) {
            v.push("loss.kappa must be positive".to_string());
        }
        if let Some(t) = &self.trace {
            if t.iter().any(|&l| !(l > 0.0)) {
                v.push("loss.trace values must be positive".to_string());
            }
        }
        v
    }

    /// Loss observed before iteration `t` starts (`l_{t-1}`); `l_ini` at t = 0.
    pub fn loss_before(&self, t: usize) -> f64 {
        if t == 0 {
            return self.l_ini;
        }
        if let Some(l) = self.trace.as_ref().and_then(|tr| tr.get(t - 1)) {
            return *l;
        }
        self.l_final + (self.l_ini - self.l_final) * (-self.kappa * t as f64).exp()
    }
}
