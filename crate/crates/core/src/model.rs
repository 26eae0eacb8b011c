//! Model assembly: feature trunk, regression head, optional rank head and
//! domain discriminator, in single-input or pairwise (concatenated) form.
//!
//! Layer names follow the adaptation grid: the trunk's last layer is
//! `conv_proxy`, the regression module's hidden layers are `fc1`, `fc2`,
//! `fc3`. Adaptation losses select any subset of those four by name, in
//! both modes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::NormalizationMap;
use crate::error::{Error, Result};
use crate::net::{forward, Activation, LayerSpec, Network, NetworkSpec, Parameters, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Single,
    Pairwise,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Pairwise => "pairwise",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "single" => Some(Mode::Single),
            "pairwise" => Some(Mode::Pairwise),
            _ => None,
        }
    }
}

/// Names selectable for adaptation, in canonical order.
pub const ADAPT_LAYER_NAMES: [&str; 4] = ["conv_proxy", "fc1", "fc2", "fc3"];

const TRUNK_WIDTH: usize = 64;
const FC_WIDTHS: [usize; 3] = [32, 16, 8];
const DISC_WIDTHS: [usize; 2] = [32, 16];

pub fn adapt_layer_width(name: &str) -> Option<usize> {
    match name {
        "conv_proxy" => Some(TRUNK_WIDTH),
        "fc1" => Some(FC_WIDTHS[0]),
        "fc2" => Some(FC_WIDTHS[1]),
        "fc3" => Some(FC_WIDTHS[2]),
        _ => None,
    }
}

/// A nonempty subset of the adaptable layer names, kept in canonical order
/// regardless of construction order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptLayerSet(Vec<String>);

impl AdaptLayerSet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let requested: Vec<String> = names.into_iter().map(|s| s.as_ref().to_string()).collect();
        for name in &requested {
            if !ADAPT_LAYER_NAMES.contains(&name.as_str()) {
                return Err(Error::UnknownLayer(name.clone()));
            }
        }
        let ordered: Vec<String> = ADAPT_LAYER_NAMES
            .iter()
            .filter(|n| requested.iter().any(|r| r == *n))
            .map(|n| n.to_string())
            .collect();
        if ordered.is_empty() {
            return Err(Error::InvalidConfig("adaptation layer set is empty".into()));
        }
        Ok(Self(ordered))
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn total_width(&self) -> usize {
        self.0
            .iter()
            .map(|n| adapt_layer_width(n).expect("validated name"))
            .sum()
    }

    /// Short label like `conv_proxy+fc1`.
    pub fn label(&self) -> String {
        self.0.join("+")
    }
}

/// Where a named layer lives inside the assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerLoc {
    Trunk(usize),
    Regression(usize),
}

/// Construction settings for [`ModelAssembly::build`].
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub mode: Mode,
    /// Build the sigmoid rank head (pairwise mode with ranking enabled).
    pub rank_head: bool,
    /// Build a domain discriminator over these adaptation layers.
    pub discriminator_for: Option<AdaptLayerSet>,
    pub normalization: Option<NormalizationMap>,
    pub seed: u64,
}

/// The assembled networks plus everything needed to reproduce them.
#[derive(Debug, Clone)]
pub struct ModelAssembly {
    pub mode: Mode,
    pub feature_dim: usize,
    pub trunk: Network,
    pub regression: Network,
    pub rank_head: Option<Network>,
    pub discriminator: Option<Network>,
    pub disc_layers: Option<AdaptLayerSet>,
    pub normalization: Option<NormalizationMap>,
    pub seed: u64,
}

/// Recorded forward state of one input through the assembly.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub trunk_tape: Tape,
    pub reg_tape: Tape,
    pub rank_tape: Option<Tape>,
    /// Regression output in model space (normalized when a normalization
    /// map is active).
    pub raw_output: f64,
    pub rank_prob: Option<f64>,
}

impl ModelAssembly {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        if config.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        if config.rank_head && config.mode != Mode::Pairwise {
            return Err(Error::InvalidConfig(
                "rank head requires pairwise mode".into(),
            ));
        }
        let trunk_input = match config.mode {
            Mode::Single => config.feature_dim,
            Mode::Pairwise => config.feature_dim * 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let trunk_spec = NetworkSpec::new(
            trunk_input,
            vec![LayerSpec::new("conv_proxy", TRUNK_WIDTH, Activation::Relu)],
        )?;
        let trunk = Network::init(trunk_spec, &mut rng);

        let reg_spec = NetworkSpec::new(
            TRUNK_WIDTH,
            vec![
                LayerSpec::new("fc1", FC_WIDTHS[0], Activation::Relu),
                LayerSpec::new("fc2", FC_WIDTHS[1], Activation::Relu),
                LayerSpec::new("fc3", FC_WIDTHS[2], Activation::Relu),
                LayerSpec::new("out", 1, Activation::Identity),
            ],
        )?;
        let regression = Network::init(reg_spec, &mut rng);

        let rank_head = if config.rank_head {
            let spec = NetworkSpec::new(
                FC_WIDTHS[2],
                vec![LayerSpec::new("rank", 1, Activation::Sigmoid)],
            )?;
            Some(Network::init(spec, &mut rng))
        } else {
            None
        };

        let (discriminator, disc_layers) = match &config.discriminator_for {
            Some(layers) => {
                let spec = NetworkSpec::new(
                    layers.total_width(),
                    vec![
                        LayerSpec::new("d1", DISC_WIDTHS[0], Activation::Relu),
                        LayerSpec::new("d2", DISC_WIDTHS[1], Activation::Relu),
                        LayerSpec::new("d3", 1, Activation::Sigmoid),
                    ],
                )?;
                (Some(Network::init(spec, &mut rng)), Some(layers.clone()))
            }
            None => (None, None),
        };

        Ok(Self {
            mode: config.mode,
            feature_dim: config.feature_dim,
            trunk,
            regression,
            rank_head,
            discriminator,
            disc_layers,
            normalization: config.normalization,
            seed: config.seed,
        })
    }

    pub fn trunk_input_dim(&self) -> usize {
        self.trunk.spec.input_dim()
    }

    pub fn layer_location(&self, name: &str) -> Option<LayerLoc> {
        if let Some(idx) = self.trunk.spec.layer_index(name) {
            return Some(LayerLoc::Trunk(idx));
        }
        self.regression
            .spec
            .layer_index(name)
            .map(LayerLoc::Regression)
    }

    /// Runs trunk, regression module, and rank head on one assembled input
    /// (a feature vector in single mode, a concatenated pair in pairwise
    /// mode), recording all tapes.
    pub fn forward_input(&self, input: &[f64]) -> Result<ForwardPass> {
        let (trunk_out, trunk_tape) = self.trunk.forward(input)?;
        let (reg_out, reg_tape) = self.regression.forward(&trunk_out)?;
        let raw_output = reg_out[0];
        let (rank_prob, rank_tape) = match &self.rank_head {
            Some(head) => {
                let fc3_idx = self
                    .regression
                    .spec
                    .layer_index("fc3")
                    .expect("regression module has fc3");
                let (out, tape) = head.forward(reg_tape.layer_output(fc3_idx))?;
                (Some(out[0]), Some(tape))
            }
            None => (None, None),
        };
        Ok(ForwardPass {
            trunk_tape,
            reg_tape,
            rank_tape,
            raw_output,
            rank_prob,
        })
    }

    /// Age prediction in years for one feature vector (single mode).
    pub fn predict_single(&self, features: &[f64]) -> Result<f64> {
        if self.mode != Mode::Single {
            return Err(Error::ModeMismatch(
                "predict_single requires a single-mode model".into(),
            ));
        }
        let pass = self.forward_input(features)?;
        Ok(self.denorm_age(pass.raw_output))
    }

    /// Signed age difference in years and rank probability for a pair
    /// (pairwise mode). The rank probability is `None` when the model was
    /// built without a rank head.
    pub fn predict_pair(&self, feat_a: &[f64], feat_b: &[f64]) -> Result<(f64, Option<f64>)> {
        if self.mode != Mode::Pairwise {
            return Err(Error::ModeMismatch(
                "predict_pair requires a pairwise-mode model".into(),
            ));
        }
        let input = concat_pair(feat_a, feat_b);
        let pass = self.forward_input(&input)?;
        Ok((self.denorm_diff(pass.raw_output), pass.rank_prob))
    }

    /// Activations at the named layers, in canonical declaration order.
    pub fn adaptation_features(&self, input: &[f64], layers: &AdaptLayerSet) -> Result<Vec<Vec<f64>>> {
        let pass = self.forward_input(input)?;
        Ok(self
            .adapt_feature_views(&pass, layers)
            .into_iter()
            .map(|v| v.to_vec())
            .collect())
    }

    /// Borrowing variant of [`Self::adaptation_features`] for a pass that
    /// was already recorded.
    pub fn adapt_feature_views<'a>(
        &self,
        pass: &'a ForwardPass,
        layers: &AdaptLayerSet,
    ) -> Vec<&'a [f64]> {
        layers
            .names()
            .iter()
            .map(|name| match self.layer_location(name).expect("validated name") {
                LayerLoc::Trunk(idx) => pass.trunk_tape.layer_output(idx),
                LayerLoc::Regression(idx) => pass.reg_tape.layer_output(idx),
            })
            .collect()
    }

    pub fn denorm_age(&self, raw: f64) -> f64 {
        match self.normalization {
            Some(map) => map.invert(raw),
            None => raw,
        }
    }

    pub fn norm_age(&self, years: f64) -> f64 {
        match self.normalization {
            Some(map) => map.apply(years),
            None => years,
        }
    }

    pub fn denorm_diff(&self, raw: f64) -> f64 {
        match self.normalization {
            Some(map) => map.invert_diff(raw),
            None => raw,
        }
    }

    pub fn norm_diff(&self, years: f64) -> f64 {
        match self.normalization {
            Some(map) => map.apply_diff(years),
            None => years,
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = self.to_checkpoint_string()?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        parse_checkpoint(&text)
    }

    /// Serializes the assembly as versioned plain text. Floats use the
    /// shortest round-tripping representation, so load reproduces the
    /// parameters bit for bit.
    pub fn to_checkpoint_string(&self) -> Result<String> {
        for (name, net) in self.networks() {
            if !net.params.is_finite() {
                return Err(Error::NonFinite(format!("{name} parameters")));
            }
        }
        let mut out = String::new();
        out.push_str("agedapt-checkpoint v1\n");
        out.push_str(&format!("mode {}\n", self.mode.as_str()));
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("feature_dim {}\n", self.feature_dim));
        match self.normalization {
            Some(map) => out.push_str(&format!("normalization {} {}\n", map.lo, map.hi)),
            None => out.push_str("normalization none\n"),
        }
        if let Some(layers) = &self.disc_layers {
            out.push_str(&format!("disc_layers {}\n", layers.names().join(" ")));
        }
        for (name, net) in self.networks() {
            out.push_str(&format!("network {name}\n"));
            out.push_str(&format!("input_dim {}\n", net.spec.input_dim()));
            for (idx, layer) in net.spec.layers().iter().enumerate() {
                out.push_str(&format!(
                    "layer {} {} {}\n",
                    layer.name,
                    layer.width,
                    layer.activation.name()
                ));
                let lp = &net.params.layers[idx];
                out.push_str("weights");
                for w in &lp.weights {
                    out.push_str(&format!(" {w}"));
                }
                out.push('\n');
                out.push_str("biases");
                for b in &lp.biases {
                    out.push_str(&format!(" {b}"));
                }
                out.push('\n');
            }
        }
        out.push_str("end\n");
        Ok(out)
    }

    fn networks(&self) -> Vec<(&'static str, &Network)> {
        let mut nets = vec![("trunk", &self.trunk), ("regression", &self.regression)];
        if let Some(head) = &self.rank_head {
            nets.push(("rank", head));
        }
        if let Some(disc) = &self.discriminator {
            nets.push(("discriminator", disc));
        }
        nets
    }
}

fn concat_pair(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Builds the concatenated pairwise network input.
pub fn pair_input(a: &[f64], b: &[f64]) -> Vec<f64> {
    concat_pair(a, b)
}

// Upper bound on declared dimensions in a checkpoint; keeps hostile input
// from driving huge allocations or overflowing size arithmetic.
const MAX_CHECKPOINT_DIM: usize = 1 << 20;

struct CheckpointParser<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> CheckpointParser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
        }
    }

    fn fail(line: usize, msg: impl Into<String>) -> Error {
        Error::Checkpoint(format!("line {}: {}", line + 1, msg.into()))
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        self.lines
            .next()
            .ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint".into()))
    }

    fn peek(&mut self) -> Option<&'a str> {
        self.lines.peek().map(|(_, l)| *l)
    }

    fn expect_keyword(&mut self, keyword: &str) -> Result<(usize, Vec<&'a str>)> {
        let (no, line) = self.next_line()?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some(k) if k == keyword => Ok((no, parts.collect())),
            Some(k) => Err(Self::fail(no, format!("expected {keyword}, got {k}"))),
            None => Err(Self::fail(no, format!("expected {keyword}, got empty line"))),
        }
    }

    fn parse_dim(no: usize, token: &str, what: &str) -> Result<usize> {
        let v: usize = token
            .parse()
            .map_err(|_| Self::fail(no, format!("unparseable {what}: {token:?}")))?;
        if v == 0 || v > MAX_CHECKPOINT_DIM {
            return Err(Self::fail(no, format!("{what} {v} out of range")));
        }
        Ok(v)
    }

    fn parse_floats(no: usize, tokens: &[&str], expected: usize, what: &str) -> Result<Vec<f64>> {
        if tokens.len() != expected {
            return Err(Self::fail(
                no,
                format!("{what}: expected {expected} values, got {}", tokens.len()),
            ));
        }
        let mut out = Vec::with_capacity(tokens.len());
        for t in tokens {
            let v: f64 = t
                .parse()
                .map_err(|_| Self::fail(no, format!("unparseable number {t:?}")))?;
            if !v.is_finite() {
                return Err(Self::fail(no, format!("non-finite value {v}")));
            }
            out.push(v);
        }
        Ok(out)
    }

    fn parse_network(&mut self, expected_name: &str) -> Result<Network> {
        let (no, args) = self.expect_keyword("network")?;
        if args != [expected_name] {
            return Err(Self::fail(
                no,
                format!("expected network {expected_name}, got {args:?}"),
            ));
        }
        let (no, args) = self.expect_keyword("input_dim")?;
        if args.len() != 1 {
            return Err(Self::fail(no, "input_dim takes one value"));
        }
        let input_dim = Self::parse_dim(no, args[0], "input_dim")?;

        let mut layers = Vec::new();
        let mut params = Vec::new();
        let mut prev_width = input_dim;
        while self.peek().is_some_and(|l| l.starts_with("layer ")) {
            let (no, args) = self.expect_keyword("layer")?;
            if args.len() != 3 {
                return Err(Self::fail(no, "layer takes name, width, activation"));
            }
            let width = Self::parse_dim(no, args[1], "layer width")?;
            let activation = Activation::from_name(args[2])
                .ok_or_else(|| Self::fail(no, format!("unknown activation {:?}", args[2])))?;
            layers.push(LayerSpec::new(args[0], width, activation));

            let (no, tokens) = self.expect_keyword("weights")?;
            let weights = Self::parse_floats(no, &tokens, prev_width * width, "weights")?;
            let (no, tokens) = self.expect_keyword("biases")?;
            let biases = Self::parse_floats(no, &tokens, width, "biases")?;
            params.push(crate::net::LayerParams { weights, biases });
            prev_width = width;
        }
        let spec = NetworkSpec::new(input_dim, layers)
            .map_err(|e| Error::Checkpoint(format!("network {expected_name}: {e}")))?;
        Ok(Network {
            spec,
            params: Parameters { layers: params },
        })
    }
}

/// Parses checkpoint text back into a [`ModelAssembly`], validating every
/// structural invariant. Never panics on malformed input.
pub fn parse_checkpoint(text: &str) -> Result<ModelAssembly> {
    let mut p = CheckpointParser::new(text);
    let (no, line) = p.next_line()?;
    if line != "agedapt-checkpoint v1" {
        return Err(CheckpointParser::fail(no, "bad magic line"));
    }
    let (no, args) = p.expect_keyword("mode")?;
    let mode = args
        .first()
        .and_then(|s| Mode::from_str(s))
        .ok_or_else(|| CheckpointParser::fail(no, "mode must be single or pairwise"))?;
    let (no, args) = p.expect_keyword("seed")?;
    let seed: u64 = args
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CheckpointParser::fail(no, "unparseable seed"))?;
    let (no, args) = p.expect_keyword("feature_dim")?;
    if args.len() != 1 {
        return Err(CheckpointParser::fail(no, "feature_dim takes one value"));
    }
    let feature_dim = CheckpointParser::parse_dim(no, args[0], "feature_dim")?;
    let (no, args) = p.expect_keyword("normalization")?;
    let normalization = match args.as_slice() {
        ["none"] => None,
        [lo, hi] => {
            let lo: f64 = lo
                .parse()
                .map_err(|_| CheckpointParser::fail(no, "unparseable normalization lo"))?;
            let hi: f64 = hi
                .parse()
                .map_err(|_| CheckpointParser::fail(no, "unparseable normalization hi"))?;
            if !lo.is_finite() || !hi.is_finite() || !(hi > lo) {
                return Err(CheckpointParser::fail(no, "normalization needs hi > lo"));
            }
            Some(NormalizationMap { lo, hi })
        }
        _ => return Err(CheckpointParser::fail(no, "normalization takes none or lo hi")),
    };
    let disc_layers = if p.peek().is_some_and(|l| l.starts_with("disc_layers ")) {
        let (no, args) = p.expect_keyword("disc_layers")?;
        Some(AdaptLayerSet::new(args).map_err(|e| CheckpointParser::fail(no, e.to_string()))?)
    } else {
        None
    };

    let trunk = p.parse_network("trunk")?;
    let regression = p.parse_network("regression")?;
    let rank_head = if p.peek() == Some("network rank") {
        Some(p.parse_network("rank")?)
    } else {
        None
    };
    let discriminator = if p.peek() == Some("network discriminator") {
        Some(p.parse_network("discriminator")?)
    } else {
        None
    };
    let (no, line) = p.next_line()?;
    if line != "end" {
        return Err(CheckpointParser::fail(no, "expected end"));
    }

    // structural cross-checks
    let expected_trunk_input = match mode {
        Mode::Single => feature_dim,
        Mode::Pairwise => feature_dim
            .checked_mul(2)
            .ok_or_else(|| Error::Checkpoint("feature_dim overflow".into()))?,
    };
    if trunk.spec.input_dim() != expected_trunk_input {
        return Err(Error::Checkpoint(format!(
            "trunk input_dim {} does not match mode/feature_dim (expected {expected_trunk_input})",
            trunk.spec.input_dim()
        )));
    }
    if regression.spec.input_dim() != trunk.spec.output_dim() {
        return Err(Error::Checkpoint(
            "regression input does not match trunk output".into(),
        ));
    }
    if regression.spec.output_dim() != 1 {
        return Err(Error::Checkpoint("regression output must be scalar".into()));
    }
    if let Some(head) = &rank_head {
        if mode != Mode::Pairwise {
            return Err(Error::Checkpoint("rank head requires pairwise mode".into()));
        }
        let fc3 = regression
            .spec
            .layer_index("fc3")
            .ok_or_else(|| Error::Checkpoint("rank head needs an fc3 layer".into()))?;
        if head.spec.input_dim() != regression.spec.layers()[fc3].width {
            return Err(Error::Checkpoint(
                "rank head input does not match fc3 width".into(),
            ));
        }
        if head.spec.output_dim() != 1 {
            return Err(Error::Checkpoint("rank head output must be scalar".into()));
        }
    }
    match (&discriminator, &disc_layers) {
        (None, None) => {}
        (Some(disc), Some(layers)) => {
            // widths in the file may differ from the compiled-in defaults;
            // check against the actual layer widths of this checkpoint
            let mut total = 0usize;
            for name in layers.names() {
                let width = match name.as_str() {
                    "conv_proxy" => trunk.spec.layers().last().map(|l| l.width),
                    other => regression
                        .spec
                        .layer_index(other)
                        .map(|i| regression.spec.layers()[i].width),
                }
                .ok_or_else(|| Error::Checkpoint(format!("disc layer {name} not in model")))?;
                total += width;
            }
            if disc.spec.input_dim() != total {
                return Err(Error::Checkpoint(format!(
                    "discriminator input {} does not match selected layer widths {total}",
                    disc.spec.input_dim()
                )));
            }
        }
        _ => {
            return Err(Error::Checkpoint(
                "discriminator and disc_layers must appear together".into(),
            ))
        }
    }

    Ok(ModelAssembly {
        mode,
        feature_dim,
        trunk,
        regression,
        rank_head,
        discriminator,
        disc_layers,
        normalization,
        seed,
    })
}

/// Replays a forward pass through trunk and regression module, stopping at
/// the named layer. Test oracle companion to `adaptation_features`.
pub fn replay_to_layer(assembly: &ModelAssembly, input: &[f64], name: &str) -> Result<Vec<f64>> {
    match assembly.layer_location(name) {
        Some(LayerLoc::Trunk(idx)) => {
            let (_, tape) = forward(&assembly.trunk.spec, &assembly.trunk.params, input)?;
            Ok(tape.layer_output(idx).to_vec())
        }
        Some(LayerLoc::Regression(idx)) => {
            let (trunk_out, _) = forward(&assembly.trunk.spec, &assembly.trunk.params, input)?;
            let (_, tape) = forward(
                &assembly.regression.spec,
                &assembly.regression.params,
                &trunk_out,
            )?;
            Ok(tape.layer_output(idx).to_vec())
        }
        None => Err(Error::UnknownLayer(name.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(mode: Mode, rank: bool, disc: Option<&[&str]>) -> ModelAssembly {
        ModelAssembly::build(&ModelConfig {
            feature_dim: 6,
            mode,
            rank_head: rank,
            discriminator_for: disc.map(|names| AdaptLayerSet::new(names.iter()).unwrap()),
            normalization: None,
            seed: 77,
        })
        .unwrap()
    }

    fn zeroed(mut assembly: ModelAssembly) -> ModelAssembly {
        for (_, net) in [
            ("t", &mut assembly.trunk),
            ("r", &mut assembly.regression),
        ] {
            for v in net.params.values_mut() {
                *v = 0.0;
            }
        }
        if let Some(head) = &mut assembly.rank_head {
            for v in head.params.values_mut() {
                *v = 0.0;
            }
        }
        assembly
    }

    #[test]
    fn zero_weight_single_model_predicts_zero() {
        let assembly = zeroed(build(Mode::Single, false, None));
        let age = assembly.predict_single(&[1.0; 6]).unwrap();
        assert_eq!(age, 0.0);
    }

    #[test]
    fn zero_weight_pairwise_model_predicts_zero_diff_and_half_rank() {
        let assembly = zeroed(build(Mode::Pairwise, true, None));
        let (diff, rank) = assembly.predict_pair(&[1.0; 6], &[2.0; 6]).unwrap();
        assert_eq!(diff, 0.0);
        assert_eq!(rank, Some(0.5));
    }

    #[test]
    fn normalization_midpoint_denormalizes_to_58_years() {
        let mut assembly = build(Mode::Single, false, None);
        assembly.normalization = Some(NormalizationMap { lo: 0.0, hi: 116.0 });
        assert!((assembly.denorm_age(0.5) - 58.0).abs() < 1e-12);
    }

    #[test]
    fn hand_set_trunk_and_head_compose_affinely() {
        // 1-layer trunk and 1-layer head, identity-style widths kept tiny by
        // building the nets directly rather than through the default sizes.
        let trunk_spec = NetworkSpec::new(
            2,
            vec![LayerSpec::new("conv_proxy", 1, Activation::Identity)],
        )
        .unwrap();
        let reg_spec =
            NetworkSpec::new(1, vec![LayerSpec::new("out", 1, Activation::Identity)]).unwrap();
        let assembly = ModelAssembly {
            mode: Mode::Single,
            feature_dim: 2,
            trunk: Network {
                spec: trunk_spec,
                params: Parameters {
                    layers: vec![crate::net::LayerParams {
                        weights: vec![3.0, -1.0],
                        biases: vec![0.5],
                    }],
                },
            },
            regression: Network {
                spec: reg_spec,
                params: Parameters {
                    layers: vec![crate::net::LayerParams {
                        weights: vec![2.0],
                        biases: vec![-1.0],
                    }],
                },
            },
            rank_head: None,
            discriminator: None,
            disc_layers: None,
            normalization: None,
            seed: 0,
        };
        // trunk: 3*1 - 1*0 + 0.5 = 3.5; head: 2*3.5 - 1 = 6
        let y = assembly.predict_single(&[1.0, 0.0]).unwrap();
        assert!((y - 6.0).abs() < 1e-12);
    }

    #[test]
    fn predict_single_rejects_pairwise_model() {
        let assembly = build(Mode::Pairwise, false, None);
        assert!(matches!(
            assembly.predict_single(&[0.0; 12]),
            Err(Error::ModeMismatch(_))
        ));
        let single = build(Mode::Single, false, None);
        assert!(matches!(
            single.predict_pair(&[0.0; 6], &[0.0; 6]),
            Err(Error::ModeMismatch(_))
        ));
    }

    #[test]
    fn rank_prob_strictly_inside_unit_interval() {
        let assembly = build(Mode::Pairwise, true, None);
        for scale in [-5.0, -1.0, 0.0, 1.0, 5.0] {
            let a = vec![scale; 6];
            let b = vec![-scale; 6];
            let (_, rank) = assembly.predict_pair(&a, &b).unwrap();
            let r = rank.unwrap();
            assert!(r > 0.0 && r < 1.0, "rank {r} out of (0,1)");
        }
    }

    #[test]
    fn adapt_layer_set_orders_and_validates_names() {
        let set = AdaptLayerSet::new(["fc1", "conv_proxy"]).unwrap();
        assert_eq!(set.names(), ["conv_proxy", "fc1"]);
        assert_eq!(set.total_width(), 64 + 32);
        assert_eq!(set.label(), "conv_proxy+fc1");
        assert!(AdaptLayerSet::new(["fc9"]).is_err());
        assert!(AdaptLayerSet::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn adaptation_features_single_layer_and_order() {
        let assembly = build(Mode::Single, false, None);
        let input = vec![0.4; 6];
        let fc1_only = AdaptLayerSet::new(["fc1"]).unwrap();
        let feats = assembly.adaptation_features(&input, &fc1_only).unwrap();
        assert_eq!(feats.len(), 1);
        assert_eq!(feats[0].len(), 32);

        let both = AdaptLayerSet::new(["fc1", "conv_proxy"]).unwrap();
        let feats = assembly.adaptation_features(&input, &both).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(feats[0].len(), 64); // conv_proxy first
        assert_eq!(feats[1].len(), 32);
    }

    #[test]
    fn adaptation_features_match_independent_replay() {
        let assembly = build(Mode::Pairwise, true, None);
        let input = vec![0.3; 12];
        for name in ADAPT_LAYER_NAMES {
            let set = AdaptLayerSet::new([name]).unwrap();
            let feats = assembly.adaptation_features(&input, &set).unwrap();
            let replay = replay_to_layer(&assembly, &input, name).unwrap();
            assert_eq!(feats[0], replay);
        }
    }

    #[test]
    fn pairwise_forward_is_reproducible() {
        let a = build(Mode::Pairwise, true, Some(&["conv_proxy", "fc1"]));
        let b = build(Mode::Pairwise, true, Some(&["conv_proxy", "fc1"]));
        let (d1, r1) = a.predict_pair(&[0.1; 6], &[0.9; 6]).unwrap();
        let (d2, r2) = b.predict_pair(&[0.1; 6], &[0.9; 6]).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut assembly = build(Mode::Pairwise, true, Some(&["conv_proxy", "fc1"]));
        assembly.normalization = Some(NormalizationMap { lo: 3.0, hi: 97.5 });
        let text = assembly.to_checkpoint_string().unwrap();
        let loaded = parse_checkpoint(&text).unwrap();
        assert_eq!(loaded.mode, assembly.mode);
        assert_eq!(loaded.seed, assembly.seed);
        assert_eq!(loaded.feature_dim, assembly.feature_dim);
        assert_eq!(loaded.normalization, assembly.normalization);
        assert_eq!(loaded.trunk.params, assembly.trunk.params);
        assert_eq!(loaded.regression.params, assembly.regression.params);
        assert_eq!(
            loaded.rank_head.as_ref().unwrap().params,
            assembly.rank_head.as_ref().unwrap().params
        );
        assert_eq!(
            loaded.discriminator.as_ref().unwrap().params,
            assembly.discriminator.as_ref().unwrap().params
        );
        assert_eq!(loaded.disc_layers, assembly.disc_layers);
        // and the reloaded model predicts identically
        let (d1, r1) = assembly.predict_pair(&[0.2; 6], &[0.7; 6]).unwrap();
        let (d2, r2) = loaded.predict_pair(&[0.2; 6], &[0.7; 6]).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn checkpoint_parser_rejects_malformed_input() {
        for text in [
            "",
            "garbage",
            "agedapt-checkpoint v2\n",
            "agedapt-checkpoint v1\nmode neither\n",
            "agedapt-checkpoint v1\nmode single\nseed x\n",
        ] {
            assert!(parse_checkpoint(text).is_err(), "accepted {text:?}");
        }
        // truncated valid prefix
        let assembly = build(Mode::Single, false, None);
        let text = assembly.to_checkpoint_string().unwrap();
        let truncated = &text[..text.len() / 2];
        assert!(parse_checkpoint(truncated).is_err());
        // corrupt a weight into non-finite
        let bad = text.replace("weights ", "weights inf ");
        assert!(parse_checkpoint(&bad).is_err());
    }
}
