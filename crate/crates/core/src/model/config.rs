use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-feature normalization across the node axis, no affine parameters.
    Instance,
    None,
}

/// How the decoder attention forms its query/key/value projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryProjection {
    /// Plain linear maps.
    Linear,
    /// Query and key maps replaced by two-layer ReLU networks.
    FfQk,
    /// Query, key and value maps replaced by two-layer ReLU networks.
    FfQkv,
}

/// Architecture switches. The flag lattice spans POMO (`norm = instance`,
/// everything else off), POMON (`norm = none`) and ReLD (`norm = none` with
/// identity mapping, query feed-forward and the distance heuristic).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width.
    pub d_h: usize,
    /// Attention heads.
    pub heads: usize,
    /// Encoder layers.
    pub layers: usize,
    /// Hidden width of every feed-forward block.
    pub d_ff: usize,
    pub norm: NormKind,
    /// Residual from the context (last-node embedding plus projected dynamic features) into the query.
    pub use_idt: bool,
    /// Residual feed-forward refinement of the decoder query.
    pub use_ff_query: bool,
    /// Subtract log distance from the last node inside the clipped compatibility.
    pub use_dist_heuristic: bool,
    /// Logit clipping constant C.
    pub logit_clip: f64,
    /// Width of the dynamic context features (remaining capacity for CVRP).
    pub d_attr: usize,
    pub query_projection: QueryProjection,
    /// Stack a second single-query attention layer after the first.
    pub extra_mha: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reld()
    }
}

impl ModelConfig {
    pub fn pomo() -> Self {
        Self {
            d_h: 64,
            heads: 8,
            layers: 6,
            d_ff: 512,
            norm: NormKind::Instance,
            use_idt: false,
            use_ff_query: false,
            use_dist_heuristic: false,
            logit_clip: 10.0,
            d_attr: 1,
            query_projection: QueryProjection::Linear,
            extra_mha: false,
        }
    }

    pub fn pomon() -> Self {
        Self {
            norm: NormKind::None,
            ..Self::pomo()
        }
    }

    pub fn reld() -> Self {
        Self {
            use_idt: true,
            use_ff_query: true,
            use_dist_heuristic: true,
            ..Self::pomon()
        }
    }

    /// Parses names such as `pomo`, `pomon+idt+ff` or `reld`. Accepted
    /// modifiers: `idt`, `ff`, `dist`, `ffqk`, `ffqkv`, `mha`.
    pub fn variant(name: &str) -> Result<Self, ModelError> {
        let mut parts = name.split('+').map(|p| p.trim().to_ascii_lowercase());
        let base = parts.next().unwrap_or_default();
        let mut cfg = match base.as_str() {
            "pomo" => Self::pomo(),
            "pomon" => Self::pomon(),
            "reld" => Self::reld(),
            other => return Err(ModelError::Config(format!("unknown base model `{other}`"))),
        };
        for m in parts {
            match m.as_str() {
                "idt" => cfg.use_idt = true,
                "ff" => cfg.use_ff_query = true,
                "dist" => cfg.use_dist_heuristic = true,
                "ffqk" => cfg.query_projection = QueryProjection::FfQk,
                "ffqkv" => cfg.query_projection = QueryProjection::FfQkv,
                "mha" => cfg.extra_mha = true,
                other => return Err(ModelError::Config(format!("unknown modifier `{other}`"))),
            }
        }
        Ok(cfg)
    }

    /// Short label of the flag combination, e.g. `POMON+IDT+FF+DIST`.
    pub fn label(&self) -> String {
        let mut s = String::from(match self.norm {
            NormKind::Instance => "POMO",
            NormKind::None => "POMON",
        });
        match self.query_projection {
            QueryProjection::Linear => {}
            QueryProjection::FfQk => s.push_str("+FFqk"),
            QueryProjection::FfQkv => s.push_str("+FFqkv"),
        }
        if self.extra_mha {
            s.push_str("+MHA");
        }
        if self.use_idt {
            s.push_str("+IDT");
        }
        if self.use_ff_query {
            s.push_str("+FF");
        }
        if self.use_dist_heuristic {
            s.push_str("+DIST");
        }
        s
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_h == 0 || self.heads == 0 || !self.d_h.is_multiple_of(self.heads) {
            return bad(format!("d_h = {} must be a positive multiple of heads = {}", self.d_h, self.heads));
        }
        if self.layers < 1 {
            return bad("at least one encoder layer is required".into());
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        if !(self.logit_clip > 0.0 && self.logit_clip.is_finite()) {
            return bad(format!("logit_clip = {} must be positive", self.logit_clip));
        }
        if self.d_attr != 1 {
            return bad(format!("d_attr = {} but CVRP carries exactly one dynamic feature", self.d_attr));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names() {
        assert_eq!(ModelConfig::variant("pomo").unwrap(), ModelConfig::pomo());
        let v = ModelConfig::variant("pomon+idt+ff").unwrap();
        assert!(v.use_idt && v.use_ff_query && !v.use_dist_heuristic);
        assert_eq!(v.norm, NormKind::None);
        assert_eq!(ModelConfig::variant("pomon+idt+ff+dist").unwrap(), ModelConfig::reld());
        assert_eq!(ModelConfig::variant("pomon+ffqkv").unwrap().label(), "POMON+FFqkv");
        assert!(ModelConfig::variant("pomo+xyz").is_err());
        assert!(ModelConfig::variant("am").is_err());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::reld().validate().is_ok());
        let mut c = ModelConfig::reld();
        c.heads = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::reld();
        c.layers = 0;
        assert!(c.validate().is_err());
    }
}
