//! Built-in option banks for the four varying contextual dimensions.

use super::ContextualDimension;

pub const LOCATIONS: [&str; 30] = [
    "garden",
    "beach",
    "forest",
    "kitchen",
    "living room",
    "street",
    "park",
    "snowy field",
    "desert",
    "lake shore",
    "mountain trail",
    "city square",
    "library",
    "farm",
    "meadow",
    "studio",
    "harbor",
    "bridge",
    "rooftop",
    "cafe",
    "classroom",
    "garage",
    "backyard",
    "riverbank",
    "playground",
    "train station",
    "market",
    "hallway",
    "balcony",
    "vineyard",
];

pub const POSITIONS: [&str; 30] = [
    "sitting",
    "standing",
    "lying down",
    "centered",
    "left of frame",
    "right of frame",
    "top of frame",
    "bottom of frame",
    "close up",
    "far away",
    "partially hidden",
    "in the corner",
    "tilted",
    "upside down",
    "leaning",
    "floating",
    "on a table",
    "on the ground",
    "next to a wall",
    "in a box",
    "behind glass",
    "on a shelf",
    "in a window",
    "on grass",
    "on sand",
    "on snow",
    "in shadow",
    "in sunlight",
    "half in frame",
    "off center",
];

pub const DAYTIMES: [&str; 30] = [
    "morning",
    "noon",
    "afternoon",
    "evening",
    "night",
    "dawn",
    "dusk",
    "sunrise",
    "sunset",
    "midnight",
    "golden hour",
    "blue hour",
    "overcast day",
    "rainy day",
    "foggy morning",
    "bright day",
    "late night",
    "early morning",
    "late afternoon",
    "twilight",
    "stormy evening",
    "clear night",
    "hazy noon",
    "winter morning",
    "summer evening",
    "autumn afternoon",
    "spring morning",
    "moonlit night",
    "cloudy dusk",
    "sunny noon",
];

pub const CAMERA_ANGLES: [&str; 30] = [
    "low angle",
    "high angle",
    "eye level",
    "bird's eye view",
    "close-up shot",
    "wide shot",
    "side view",
    "front view",
    "back view",
    "top down",
    "dutch angle",
    "over the shoulder",
    "macro",
    "telephoto",
    "fisheye",
    "panoramic",
    "medium shot",
    "long shot",
    "worm's eye view",
    "three quarter view",
    "profile view",
    "aerial view",
    "tracking shot",
    "tilted frame",
    "handheld",
    "candid",
    "symmetrical framing",
    "rule of thirds",
    "shallow depth of field",
    "deep focus",
];

/// The four dimensions with the first `options` entries of each bank
/// (15 or 30 in practice) and unit weights.
pub fn default_dimensions(options: usize) -> Vec<ContextualDimension> {
    [
        ("locations", &LOCATIONS),
        ("position", &POSITIONS),
        ("daytime", &DAYTIMES),
        ("camera angle", &CAMERA_ANGLES),
    ]
    .into_iter()
    .map(|(name, bank)| ContextualDimension {
        name: name.to_string(),
        weight: 1.0,
        options: bank.iter().take(options).map(|s| s.to_string()).collect(),
    })
    .collect()
}

/// Zero-shot style templates for prompt ensembles. `{class}` is required,
/// `{superclass}` optional.
pub const ENSEMBLE_TEMPLATES: [&str; 8] = [
    "a photo of a {class}, which is a type of {superclass}",
    "a photo of a {class}.",
    "a blurry photo of a {class}.",
    "a close-up photo of a {class}.",
    "a bright photo of a {class}.",
    "a rendering of a {class}.",
    "a photo of the small {class}.",
    "a photo of the large {class}.",
];
