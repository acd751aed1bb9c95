//! Simulation context: avatar personas, the smart-home environment and the
//! per-run memory.

use std::collections::BTreeMap;
use std::fmt;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::provider::{chat_with_retry, ChatMessage, ChatProvider, ChatRequest, RetryPolicy};

/// Identifier recorded in run manifests for the profile sampler.
pub const RNG_ALGORITHM: &str = "splitmix64";

pub const TIPI_MIN: f64 = 1.0;
pub const TIPI_MAX: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TipiTrait {
    Extraversion,
    Agreeableness,
    Conscientiousness,
    EmotionalStability,
    Openness,
}

impl TipiTrait {
    pub const ALL: [TipiTrait; 5] = [
        TipiTrait::Extraversion,
        TipiTrait::Agreeableness,
        TipiTrait::Conscientiousness,
        TipiTrait::EmotionalStability,
        TipiTrait::Openness,
    ];

    pub fn key(self) -> &'static str {
        match self {
            TipiTrait::Extraversion => "extraversion",
            TipiTrait::Agreeableness => "agreeableness",
            TipiTrait::Conscientiousness => "conscientiousness",
            TipiTrait::EmotionalStability => "emotional_stability",
            TipiTrait::Openness => "openness",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TipiTrait::Extraversion => "Extraversion",
            TipiTrait::Agreeableness => "Agreeableness",
            TipiTrait::Conscientiousness => "Conscientiousness",
            TipiTrait::EmotionalStability => "Emotional Stability",
            TipiTrait::Openness => "Openness",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TipiScores {
    pub extraversion: f64,
    pub agreeableness: f64,
    pub conscientiousness: f64,
    pub emotional_stability: f64,
    pub openness: f64,
}

impl TipiScores {
    pub fn uniform(v: f64) -> Self {
        Self {
            extraversion: v,
            agreeableness: v,
            conscientiousness: v,
            emotional_stability: v,
            openness: v,
        }
    }

    pub fn get(&self, t: TipiTrait) -> f64 {
        match t {
            TipiTrait::Extraversion => self.extraversion,
            TipiTrait::Agreeableness => self.agreeableness,
            TipiTrait::Conscientiousness => self.conscientiousness,
            TipiTrait::EmotionalStability => self.emotional_stability,
            TipiTrait::Openness => self.openness,
        }
    }

    fn set(&mut self, t: TipiTrait, v: f64) {
        match t {
            TipiTrait::Extraversion => self.extraversion = v,
            TipiTrait::Agreeableness => self.agreeableness = v,
            TipiTrait::Conscientiousness => self.conscientiousness = v,
            TipiTrait::EmotionalStability => self.emotional_stability = v,
            TipiTrait::Openness => self.openness = v,
        }
    }

    pub fn is_valid(&self) -> bool {
        TipiTrait::ALL.iter().all(|t| on_tipi_grid(self.get(*t)))
    }

    /// `Extraversion: 4, Agreeableness: 6, ...`
    pub fn describe(&self) -> String {
        TipiTrait::ALL
            .iter()
            .map(|t| format!("{}: {}", t.label(), fmt_score(self.get(*t))))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn on_tipi_grid(v: f64) -> bool {
    (TIPI_MIN..=TIPI_MAX).contains(&v) && (v * 2.0).fract() == 0.0
}

/// Renders whole scores without a trailing `.0`.
pub fn fmt_score(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvatarProfile {
    pub subject_id: String,
    pub age: u32,
    pub gender: String,
    pub household_type: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    pub tipi: TipiScores,
    #[serde(default)]
    pub narrative: String,
}

impl AvatarProfile {
    /// Profile block shared by the schedule, enrichment and avatar prompts.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("Subject ID: {}\n", self.subject_id));
        out.push_str(&format!("Age: {}\n", self.age));
        out.push_str(&format!("Gender: {}\n", self.gender));
        out.push_str(&format!("House type: {}\n", self.household_type));
        for (k, v) in &self.attributes {
            out.push_str(&format!("{}: {v}\n", humanize(k)));
        }
        out.push_str(&format!("TIPI Scores: {}\n", self.tipi.describe()));
        if !self.narrative.is_empty() {
            out.push_str(&format!("Persona: {}\n", self.narrative));
        }
        out
    }
}

fn humanize(key: &str) -> String {
    let s = key.replace('_', " ");
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => s,
    }
}

/// Draws one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampler {
    Categorical {
        labels: Vec<String>,
        weights: Vec<f64>,
    },
    /// Inclusive integer range, rendered as a decimal label.
    IntRange { min: i64, max: i64 },
}

impl Sampler {
    pub fn constant(label: impl Into<String>) -> Self {
        Sampler::Categorical {
            labels: vec![label.into()],
            weights: vec![1.0],
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        match self {
            Sampler::Categorical { labels, weights } => {
                if labels.len() != weights.len() {
                    return Err(Error::Distribution(format!(
                        "{field}: {} labels but {} weights",
                        labels.len(),
                        weights.len()
                    )));
                }
                check_weights(field, weights)
            }
            Sampler::IntRange { min, max } if min > max => Err(Error::Distribution(format!(
                "{field}: empty range [{min}, {max}]"
            ))),
            Sampler::IntRange { .. } => Ok(()),
        }
    }

    fn draw(&self, rng: &mut Draws) -> String {
        match self {
            Sampler::Categorical { labels, weights } => labels[rng.categorical(weights)].clone(),
            Sampler::IntRange { min, max } => rng.int_range(*min, *max).to_string(),
        }
    }
}

fn check_weights(field: &str, weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Distribution(format!("{field}: no categories")));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::Distribution(format!(
            "{field}: weight {w} is not positive"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Distribution(format!(
            "{field}: weights sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Draws one TIPI score on the half-point grid of [1, 7].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraitSampler {
    Categorical {
        values: Vec<f64>,
        weights: Vec<f64>,
    },
    /// Uniform over the grid points in [min, max].
    Range {
        min: f64,
        max: f64,
    },
}

impl TraitSampler {
    pub fn constant(v: f64) -> Self {
        TraitSampler::Categorical {
            values: vec![v],
            weights: vec![1.0],
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        match self {
            TraitSampler::Categorical { values, weights } => {
                if values.len() != weights.len() {
                    return Err(Error::Distribution(format!(
                        "{field}: {} values but {} weights",
                        values.len(),
                        weights.len()
                    )));
                }
                if let Some(v) = values.iter().find(|v| !on_tipi_grid(**v)) {
                    return Err(Error::Distribution(format!(
                        "{field}: {v} is off the TIPI grid"
                    )));
                }
                check_weights(field, weights)
            }
            TraitSampler::Range { min, max } => {
                if !on_tipi_grid(*min) || !on_tipi_grid(*max) || min > max {
                    return Err(Error::Distribution(format!(
                        "{field}: invalid range [{min}, {max}]"
                    )));
                }
                Ok(())
            }
        }
    }

    fn draw(&self, rng: &mut Draws) -> f64 {
        match self {
            TraitSampler::Categorical { values, weights } => values[rng.categorical(weights)],
            TraitSampler::Range { min, max } => {
                let steps = ((max - min) * 2.0).round() as i64;
                min + rng.int_range(0, steps) as f64 * 0.5
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TipiSampler {
    pub extraversion: TraitSampler,
    pub agreeableness: TraitSampler,
    pub conscientiousness: TraitSampler,
    pub emotional_stability: TraitSampler,
    pub openness: TraitSampler,
}

impl TipiSampler {
    pub fn all(s: TraitSampler) -> Self {
        Self {
            extraversion: s.clone(),
            agreeableness: s.clone(),
            conscientiousness: s.clone(),
            emotional_stability: s.clone(),
            openness: s,
        }
    }

    fn get(&self, t: TipiTrait) -> &TraitSampler {
        match t {
            TipiTrait::Extraversion => &self.extraversion,
            TipiTrait::Agreeableness => &self.agreeableness,
            TipiTrait::Conscientiousness => &self.conscientiousness,
            TipiTrait::EmotionalStability => &self.emotional_stability,
            TipiTrait::Openness => &self.openness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileDistribution {
    pub age: Sampler,
    pub gender: Sampler,
    pub household_type: Sampler,
    #[serde(default)]
    pub attributes: BTreeMap<String, Sampler>,
    pub tipi: TipiSampler,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ProfileDistribution {
    /// Adult residents with uniform traits. Used when no distribution is given.
    pub fn adult_residents() -> Self {
        let cat = |labels: &[&str], weights: &[f64]| Sampler::Categorical {
            labels: labels.iter().map(|l| l.to_string()).collect(),
            weights: weights.to_vec(),
        };
        Self {
            age: Sampler::IntRange { min: 18, max: 70 },
            gender: cat(&["female", "male", "non-binary"], &[0.48, 0.48, 0.04]),
            household_type: cat(
                &[
                    "lives alone",
                    "lives with partner",
                    "lives with family",
                    "shares with roommates",
                ],
                &[0.3, 0.3, 0.3, 0.1],
            ),
            attributes: BTreeMap::new(),
            tipi: TipiSampler::all(TraitSampler::Range { min: 1.0, max: 7.0 }),
            note: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.age.validate("age")?;
        match &self.age {
            Sampler::IntRange { min, .. } if *min < 1 => {
                return Err(Error::Distribution(
                    "age: range must start at 1 or above".into(),
                ))
            }
            Sampler::Categorical { labels, .. } => {
                if let Some(l) = labels
                    .iter()
                    .find(|l| l.parse::<u32>().map_or(true, |a| a == 0))
                {
                    return Err(Error::Distribution(format!(
                        "age: `{l}` is not a positive integer"
                    )));
                }
            }
            _ => {}
        }
        self.gender.validate("gender")?;
        self.household_type.validate("household_type")?;
        for (k, s) in &self.attributes {
            s.validate(&format!("attributes.{k}"))?;
        }
        for t in TipiTrait::ALL {
            self.tipi.get(t).validate(&format!("tipi.{}", t.key()))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let dist: Self = serde_path_to_error::deserialize(value)
            .map_err(|e| Error::Distribution(format!("{}: {}", e.path(), e.inner())))?;
        dist.validate()?;
        Ok(dist)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// SplitMix64 with a fixed value mapping, so other implementations can
/// reproduce sampled profiles exactly:
/// `u = (next_u64 >> 11) * 2^-53`; categorical picks the first index whose
/// cumulative weight exceeds `u`; integer ranges use `min + floor(u * len)`.
pub struct Draws(SplitMix64);

impl Draws {
    pub fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let u = self.unit();
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.len() - 1
    }

    pub fn int_range(&mut self, min: i64, max: i64) -> i64 {
        let len = (max - min + 1) as f64;
        let k = (self.unit() * len).floor() as i64;
        min + k.min(max - min)
    }
}

/// Samples `n` profiles with empty narratives. Draw order per subject: age,
/// gender, household type, attributes in key order, then the five traits.
pub fn sample_profiles(
    dist: &ProfileDistribution,
    n: usize,
    seed: u64,
) -> Result<Vec<AvatarProfile>> {
    if n == 0 {
        return Err(Error::Precondition(
            "profile count must be at least 1".into(),
        ));
    }
    dist.validate()?;
    let mut rng = Draws::new(seed);
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let age = dist
            .age
            .draw(&mut rng)
            .parse()
            .map_err(|_| Error::Distribution("age sampler produced a non-integer".into()))?;
        let gender = dist.gender.draw(&mut rng);
        let household_type = dist.household_type.draw(&mut rng);
        let attributes = dist
            .attributes
            .iter()
            .map(|(k, s)| (k.clone(), s.draw(&mut rng)))
            .collect();
        let mut tipi = TipiScores::uniform(TIPI_MIN);
        for t in TipiTrait::ALL {
            tipi.set(t, dist.tipi.get(t).draw(&mut rng));
        }
        out.push(AvatarProfile {
            subject_id: format!("S{i}"),
            age,
            gender,
            household_type,
            attributes,
            tipi,
            narrative: String::new(),
        });
    }
    Ok(out)
}

const NARRATIVE_SYSTEM: &str =
    "You write short background narratives for simulated participants of a \
smart home study. Write in the third person, one paragraph of four to six sentences.";

/// The request used to write a persona narrative. Contains every profile field.
pub fn narrative_request(profile: &AvatarProfile, model_id: &str) -> ChatRequest {
    let mut user = String::from(
        "Write a background narrative for the person below. Cover their lifestyle routine, \
communication style, likes and dislikes. Let the personality scores (1 = low, 7 = high) shape \
the description without naming them.\n\n",
    );
    user.push_str(&profile.describe());
    user.push_str("\nOutput the narrative text only.");
    ChatRequest::new(
        model_id,
        format!("{}/narrative", profile.subject_id),
        vec![
            ChatMessage::system(NARRATIVE_SYSTEM),
            ChatMessage::user(user),
        ],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Narrative {
    pub text: String,
    pub attempts: u32,
}

pub fn generate_narrative(
    profile: &AvatarProfile,
    provider: &dyn ChatProvider,
    policy: &RetryPolicy,
) -> Result<Narrative> {
    let req = narrative_request(profile, &provider.identity().model_id);
    let reply = chat_with_retry(provider, &req, policy)?;
    Ok(Narrative {
        text: reply.response.text.trim().to_string(),
        attempts: reply.attempts,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    pub zone: String,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capabilities {
    pub sensing: Vec<String>,
    pub command_modes: Vec<String>,
    pub feedback_channels: Vec<String>,
}

/// Coarse activity vocabulary offered to the schedule generator.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub modifiers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub zones: Vec<String>,
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub capabilities: Capabilities,
    #[serde(default)]
    pub vocabulary: Vocabulary,
    /// Reserved for shared-living layouts; must stay false for now.
    #[serde(default)]
    pub multi_occupant: bool,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl EnvironmentConfig {
    /// The default one-bedroom apartment; devices sit in the main room.
    pub fn one_bedroom() -> Self {
        let light = strings(&[
            "turn on",
            "turn off",
            "adjust brightness",
            "adjust color temperature",
            "change color mode",
        ]);
        let device = |name: &str, actions: &[&str]| DeviceSpec {
            name: name.into(),
            zone: "main room".into(),
            actions: strings(actions),
        };
        let mut devices: Vec<DeviceSpec> = [
            "ceiling light",
            "downlight (TV)",
            "downlight (sofa)",
            "ambient light strip",
            "floor lamp",
        ]
        .iter()
        .map(|n| DeviceSpec {
            name: n.to_string(),
            zone: "main room".into(),
            actions: light.clone(),
        })
        .collect();
        devices.extend([
            device("TV", &["turn on", "turn off", "adjust volume", "watch"]),
            device(
                "speaker",
                &["turn on", "turn off", "adjust volume", "listen", "play"],
            ),
            device(
                "air conditioner",
                &["turn on", "turn off", "adjust temperature", "adjust mode"],
            ),
            device("fan", &["turn on", "turn off", "adjust speed"]),
            device("humidifier", &["turn on", "turn off", "adjust level"]),
            device("floor sweeper", &["start", "pause", "return to base"]),
            device(
                "vacuum",
                &["turn on", "turn off", "start", "pause", "return to base"],
            ),
            device("smart curtain", &["open", "close"]),
            device("light switch panel", &["press", "toggle"]),
            device("remote control", &["press", "adjust"]),
            device("device buttons", &["press", "toggle"]),
        ]);
        Self {
            zones: strings(&["main room", "bed area", "wardrobe area", "toilet"]),
            devices,
            capabilities: Capabilities {
                sensing: strings(&["user position", "posture", "movement", "gesture"]),
                command_modes: strings(&["voice", "gesture", "physical button", "remote control"]),
                feedback_channels: strings(&[
                    "visual display (rule status)",
                    "ambient changes",
                    "voice confirmation",
                ]),
            },
            vocabulary: Vocabulary {
                actions: strings(&[
                    "General",
                    "Physical(Fine-Grained)",
                    "Digital(Interface-Level)",
                    "Cleaning",
                ]),
                objects: strings(&["Consumables", "Tools", "Furniture", "Appliance"]),
                modifiers: strings(&["Carefully"]),
            },
            multi_occupant: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, d) in self.devices.iter().enumerate() {
            if !self.zones.contains(&d.zone) {
                return Err(Error::schema(
                    format!("devices[{i}].zone"),
                    format!("zone `{}` is not listed in zones", d.zone),
                ));
            }
            if d.actions.is_empty() {
                return Err(Error::schema(
                    format!("devices[{i}].actions"),
                    "must not be empty",
                ));
            }
            if !seen.insert(d.name.as_str()) {
                return Err(Error::schema(
                    format!("devices[{i}].name"),
                    format!("duplicate device `{}`", d.name),
                ));
            }
        }
        if self.multi_occupant {
            return Err(Error::schema(
                "multi_occupant",
                "multi-occupant households are not supported",
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(value)
            .map_err(|e| Error::schema(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn device(&self, name: &str) -> Option<&DeviceSpec> {
        self.devices.iter().find(|d| d.name == name)
    }

    /// Text block listing zones, devices and capabilities for prompts.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("Environmental Zones: {}\n", self.zones.join(", ")));
        out.push_str("Interacted Devices (device: supported actions):\n");
        for d in &self.devices {
            out.push_str(&format!(
                "  {} [{}]: {}\n",
                d.name,
                d.zone,
                d.actions.join(", ")
            ));
        }
        let c = &self.capabilities;
        if !c.sensing.is_empty() {
            out.push_str(&format!("Sensing: {}\n", c.sensing.join(", ")));
        }
        if !c.command_modes.is_empty() {
            out.push_str(&format!("Command Modes: {}\n", c.command_modes.join(", ")));
        }
        if !c.feedback_channels.is_empty() {
            out.push_str(&format!(
                "Feedback Channels: {}\n",
                c.feedback_channels.join(", ")
            ));
        }
        out
    }
}

/// Which attribute an action touches, and the attribute's resting value.
fn action_attribute(action: &str) -> (String, Value) {
    match action {
        "turn on" | "turn off" | "toggle" => ("power".into(), "off".into()),
        "open" | "close" => ("position".into(), "closed".into()),
        "start" | "pause" | "return to base" | "watch" | "listen" | "play" => {
            ("activity".into(), "idle".into())
        }
        "press" => ("presses".into(), 0.into()),
        "change color mode" => ("color_mode".into(), "default".into()),
        "adjust mode" => ("mode".into(), "default".into()),
        "adjust" => ("setting".into(), 0.into()),
        a => match a.strip_prefix("adjust ") {
            Some(rest) => (rest.replace(' ', "_"), 0.into()),
            None => (a.replace(' ', "_"), "idle".into()),
        },
    }
}

pub type DeviceState = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentState {
    pub devices: BTreeMap<String, DeviceState>,
    /// Logical clock in seconds; follows the schedule, never wall time.
    pub clock: i64,
}

/// Every device off and every level at its minimum; clock 0.
pub fn init_environment(cfg: &EnvironmentConfig) -> EnvironmentState {
    let devices = cfg
        .devices
        .iter()
        .map(|d| {
            let state: DeviceState = d.actions.iter().map(|a| action_attribute(a)).collect();
            (d.name.clone(), state)
        })
        .collect();
    EnvironmentState { devices, clock: 0 }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceAction {
    pub device: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

impl DeviceAction {
    pub fn new(device: impl Into<String>, action: impl Into<String>) -> Self {
        Self {
            device: device.into(),
            action: action.into(),
            value: None,
        }
    }

    pub fn with_value(mut self, value: impl Into<String>) -> Self {
        self.value = Some(value.into());
        self
    }
}

impl fmt::Display for DeviceAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.device, self.action)?;
        if let Some(v) = &self.value {
            write!(f, "|{v}")?;
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> Value {
    raw.trim()
        .parse::<i64>()
        .map(Value::from)
        .unwrap_or_else(|_| Value::from(raw.trim()))
}

/// Checks an action against the configuration without applying it.
pub fn check_action(cfg: &EnvironmentConfig, action: &DeviceAction) -> Result<()> {
    let spec = cfg
        .device(&action.device)
        .ok_or_else(|| Error::UnknownDevice(action.device.clone()))?;
    if !spec.actions.iter().any(|a| a == &action.action) {
        return Err(Error::UnsupportedAction {
            device: action.device.clone(),
            action: action.action.clone(),
        });
    }
    Ok(())
}

/// Applies actions in order. Only the attribute each action targets changes.
pub fn apply_actions(
    cfg: &EnvironmentConfig,
    env: &EnvironmentState,
    actions: &[DeviceAction],
) -> Result<EnvironmentState> {
    let mut next = env.clone();
    for action in actions {
        check_action(cfg, action)?;
        let (attr, rest) = action_attribute(&action.action);
        let state = next
            .devices
            .get_mut(&action.device)
            .ok_or_else(|| Error::UnknownDevice(action.device.clone()))?;
        let current = state.get(&attr).cloned().unwrap_or(rest.clone());
        let value = match action.action.as_str() {
            "turn on" => "on".into(),
            "turn off" => "off".into(),
            "toggle" => if current == "on" { "off" } else { "on" }.into(),
            "open" => "open".into(),
            "close" => "closed".into(),
            "start" => "running".into(),
            "pause" => "paused".into(),
            "return to base" => "docked".into(),
            "watch" => "watching".into(),
            "listen" => "listening".into(),
            "play" => "playing".into(),
            "press" => Value::from(current.as_i64().unwrap_or(0) + 1),
            _ => match (&action.value, &rest) {
                (Some(v), _) => parse_value(v),
                (None, Value::Number(_)) => Value::from(current.as_i64().unwrap_or(0) + 1),
                (None, _) => Value::from(action.action.replace(' ', "_")),
            },
        };
        state.insert(attr, value);
    }
    Ok(next)
}

/// Attribute-level changes between two states, as `(device, attribute, before, after)`.
pub fn state_diff(
    before: &EnvironmentState,
    after: &EnvironmentState,
) -> Vec<(String, String, Value, Value)> {
    let mut out = Vec::new();
    for (device, state) in &after.devices {
        let old = before.devices.get(device);
        for (attr, v) in state {
            let prev = old
                .and_then(|o| o.get(attr))
                .cloned()
                .unwrap_or(Value::Null);
            if &prev != v {
                out.push((device.clone(), attr.clone(), prev, v.clone()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Assistant,
    Avatar,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Assistant => "assistant",
            Role::Avatar => "avatar",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Short-term memory of one run. Histories hold sequence numbers of the
/// transcript turns and schedule entries they refer to.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryState {
    pub shared_history: Vec<u64>,
    pub activity_history: Vec<u64>,
    pub role_notes: BTreeMap<Role, Vec<String>>,
}

fn push_increasing(list: &mut Vec<u64>, stream: &str, seq: u64) -> Result<()> {
    if let Some(&last) = list.last() {
        if seq <= last {
            return Err(Error::Sequence {
                stream: stream.into(),
                expected: last + 1,
                got: seq,
            });
        }
    }
    list.push(seq);
    Ok(())
}

impl MemoryState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append_shared(&mut self, seq: u64) -> Result<()> {
        push_increasing(&mut self.shared_history, "shared_history", seq)
    }

    pub fn append_activity(&mut self, seq: u64) -> Result<()> {
        push_increasing(&mut self.activity_history, "activity_history", seq)
    }

    pub fn add_note(&mut self, role: Role, note: impl Into<String>) {
        self.role_notes.entry(role).or_default().push(note.into());
    }

    pub fn notes(&self, role: Role) -> &[String] {
        self.role_notes.get(&role).map(Vec::as_slice).unwrap_or(&[])
    }
}
