//! The closed attribute vocabulary and noun phrases built from it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
    Cyan,
    Purple,
    Brown,
    Gray,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Rubber,
    Metal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Sphere,
    Cylinder,
    Bowl,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    /// Per-axis half extent in world units.
    pub fn half_extent(self) -> f64 {
        match self {
            Size::Small => SMALL_HALF_EXTENT,
            Size::Large => LARGE_HALF_EXTENT,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

/// Half extent used when a phrase carries no size word.
pub const MEDIUM_HALF_EXTENT: f64 = 0.5;
pub const SMALL_HALF_EXTENT: f64 = 0.35;
pub const LARGE_HALF_EXTENT: f64 = 0.7;

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Yellow,
        Color::Cyan,
        Color::Purple,
        Color::Brown,
        Color::Gray,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Purple => "purple",
            Color::Brown => "brown",
            Color::Gray => "gray",
        }
    }

    /// Base albedo in [0,1].
    pub fn rgb(self) -> [f32; 3] {
        let c: [u8; 3] = match self {
            Color::Red => [173, 35, 35],
            Color::Blue => [42, 75, 215],
            Color::Green => [29, 105, 20],
            Color::Yellow => [255, 238, 51],
            Color::Cyan => [41, 208, 208],
            Color::Purple => [129, 38, 192],
            Color::Brown => [129, 74, 25],
            Color::Gray => [87, 87, 87],
        };
        c.map(|v| v as f32 / 255.0)
    }
}

impl Material {
    pub const ALL: [Material; 2] = [Material::Rubber, Material::Metal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Material::Rubber => "rubber",
            Material::Metal => "metal",
        }
    }

    /// Brightness multiplier the renderer applies to the base albedo.
    pub fn shading(self) -> f32 {
        match self {
            Material::Rubber => 0.6,
            Material::Metal => 1.0,
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Cube, Shape::Sphere, Shape::Cylinder, Shape::Bowl];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Sphere => "sphere",
            Shape::Cylinder => "cylinder",
            Shape::Bowl => "bowl",
        }
    }
}

/// Shaded color of a surface with the given attributes.
pub fn surface_rgb(color: Color, material: Material) -> [f32; 3] {
    let s = material.shading();
    color.rgb().map(|v| v * s)
}

/// Inverse of [`surface_rgb`]: nearest palette entry.
pub fn decode_rgb(rgb: [f32; 3]) -> (Color, Material) {
    let mut best = (Color::Gray, Material::Rubber);
    let mut best_d = f32::INFINITY;
    for c in Color::ALL {
        for m in Material::ALL {
            let p = surface_rgb(c, m);
            let d: f32 = (0..3).map(|k| (p[k] - rgb[k]).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = (c, m);
            }
        }
    }
    best
}

/// One word of the closed vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Size(Size),
    Color(Color),
    Material(Material),
    Shape(Shape),
}

impl Token {
    pub fn all() -> Vec<Token> {
        let mut v = Vec::with_capacity(16);
        v.extend(Size::ALL.map(Token::Size));
        v.extend(Color::ALL.map(Token::Color));
        v.extend(Material::ALL.map(Token::Material));
        v.extend(Shape::ALL.map(Token::Shape));
        v
    }

    pub fn word(self) -> &'static str {
        match self {
            Token::Size(s) => s.word(),
            Token::Color(c) => c.word(),
            Token::Material(m) => m.word(),
            Token::Shape(s) => s.word(),
        }
    }

    pub fn from_word(w: &str) -> Result<Token> {
        Token::all()
            .into_iter()
            .find(|t| t.word() == w)
            .ok_or_else(|| Error::UnknownToken(w.to_string()))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

/// `[size] [color] [material] shape`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NounPhrase {
    pub size: Option<Size>,
    pub color: Option<Color>,
    pub material: Option<Material>,
    pub shape: Shape,
}

impl NounPhrase {
    pub fn new(shape: Shape) -> Self {
        Self {
            size: None,
            color: None,
            material: None,
            shape,
        }
    }

    pub fn with_size(mut self, s: Size) -> Self {
        self.size = Some(s);
        self
    }

    pub fn with_color(mut self, c: Color) -> Self {
        self.color = Some(c);
        self
    }

    pub fn with_material(mut self, m: Material) -> Self {
        self.material = Some(m);
        self
    }

    /// Adjectives in canonical order.
    pub fn adjectives(&self) -> Vec<Token> {
        let mut v = Vec::new();
        if let Some(s) = self.size {
            v.push(Token::Size(s));
        }
        if let Some(c) = self.color {
            v.push(Token::Color(c));
        }
        if let Some(m) = self.material {
            v.push(Token::Material(m));
        }
        v
    }

    /// Adjectives followed by the noun.
    pub fn tokens(&self) -> Vec<Token> {
        let mut v = self.adjectives();
        v.push(Token::Shape(self.shape));
        v
    }

    /// Builds a phrase from adjective words and a noun word, in any adjective order.
    pub fn from_words<S: AsRef<str>>(adjectives: &[S], noun: &str) -> Result<Self> {
        let shape = match Token::from_word(noun)? {
            Token::Shape(s) => s,
            _ => return Err(Error::UnknownToken(noun.to_string())),
        };
        let mut np = NounPhrase::new(shape);
        for a in adjectives {
            match Token::from_word(a.as_ref())? {
                Token::Size(s) => np.size = Some(s),
                Token::Color(c) => np.color = Some(c),
                Token::Material(m) => np.material = Some(m),
                Token::Shape(_) => return Err(Error::UnknownToken(a.as_ref().to_string())),
            }
        }
        Ok(np)
    }

    /// True if every attribute the phrase names agrees with the object.
    pub fn matches(&self, obj: &ObjectAttrs) -> bool {
        self.shape == obj.shape
            && self.size.is_none_or(|s| s == obj.size)
            && self.color.is_none_or(|c| c == obj.color)
            && self.material.is_none_or(|m| m == obj.material)
    }

    /// Per-axis half extent implied by the size word.
    pub fn half_extent(&self) -> f64 {
        self.size.map_or(MEDIUM_HALF_EXTENT, Size::half_extent)
    }
}

impl fmt::Display for NounPhrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self.tokens().iter().map(|t| t.word()).collect();
        f.write_str(&words.join(" "))
    }
}

/// Full attributes of a physical object in a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectAttrs {
    pub size: Size,
    pub color: Color,
    pub material: Material,
    pub shape: Shape,
}

impl ObjectAttrs {
    pub fn full_phrase(&self) -> NounPhrase {
        NounPhrase {
            size: Some(self.size),
            color: Some(self.color),
            material: Some(self.material),
            shape: self.shape,
        }
    }
}
