use std::fmt;

/// Which attention pass a prompt or adapter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Temporal,
    Spatial,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::Temporal => "T",
            Role::Spatial => "S",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AdapterPart {
    DownWeight,
    DownBias,
    UpWeight,
    UpBias,
}

impl AdapterPart {
    pub const ALL: [AdapterPart; 4] = [
        AdapterPart::DownWeight,
        AdapterPart::DownBias,
        AdapterPart::UpWeight,
        AdapterPart::UpBias,
    ];

    fn tag(self) -> &'static str {
        match self {
            AdapterPart::DownWeight => "down_w",
            AdapterPart::DownBias => "down_b",
            AdapterPart::UpWeight => "up_w",
            AdapterPart::UpBias => "up_b",
        }
    }
}

/// Identity of a trainable tensor. Layers and tasks are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    AgnosticPrompt { layer: usize, role: Role },
    TaskPrompt { task: usize, layer: usize, role: Role },
    Adapter { layer: usize, role: Role, part: AdapterPart },
    TaskKey(usize),
    HeadWeight,
    HeadBias,
    /// Backbone tensor by its position in `BackboneParams::named_tensors`;
    /// only ever trainable while the backbone itself is being pretrained.
    Backbone(usize),
}

impl ParamKey {
    pub fn group(self) -> ParamGroup {
        match self {
            ParamKey::AgnosticPrompt { role, .. } => ParamGroup::AgnosticPrompt(role),
            ParamKey::TaskPrompt { task, role, .. } => ParamGroup::TaskPrompt { task, role },
            ParamKey::Adapter { role, .. } => ParamGroup::Adapter(role),
            ParamKey::TaskKey(t) => ParamGroup::TaskKey(t),
            ParamKey::HeadWeight | ParamKey::HeadBias => ParamGroup::Head,
            ParamKey::Backbone(_) => ParamGroup::Backbone,
        }
    }

    /// Name used inside checkpoints.
    pub fn name(self) -> String {
        match self {
            ParamKey::AgnosticPrompt { layer, role } => format!("prompt/g_{}/{}", role.tag(), layer),
            ParamKey::TaskPrompt { task, layer, role } => {
                format!("prompt/e_{}/{}/{}", role.tag(), task, layer)
            }
            ParamKey::Adapter { layer, role, part } => {
                format!("adapter/{}/{}/{}", role.tag(), layer, part.tag())
            }
            ParamKey::TaskKey(t) => format!("key/{t}"),
            ParamKey::HeadWeight => "head/weight".to_string(),
            ParamKey::HeadBias => "head/bias".to_string(),
            ParamKey::Backbone(i) => format!("backbone/#{i}"),
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Coarse parameter groups that the two training stages switch on and off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Backbone,
    AgnosticPrompt(Role),
    TaskPrompt { task: usize, role: Role },
    Adapter(Role),
    TaskKey(usize),
    Head,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Backbone => f.write_str("backbone"),
            ParamGroup::AgnosticPrompt(r) => write!(f, "g^{}", r.tag()),
            ParamGroup::TaskPrompt { task, role } => write!(f, "e_{}^{}", task, role.tag()),
            ParamGroup::Adapter(Role::Temporal) => f.write_str("theta_T"),
            ParamGroup::Adapter(Role::Spatial) => f.write_str("theta_S"),
            ParamGroup::TaskKey(t) => write!(f, "k_{t}"),
            ParamGroup::Head => f.write_str("head"),
        }
    }
}
