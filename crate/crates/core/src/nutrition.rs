//! Food knowledge base: ingredients, health value and per-100 g nutrition.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const STORE_VERSION: u32 = 1;
/// Allowed excess of protein + carbohydrate + fat over 100 g per 100 g.
pub const MACRO_TOLERANCE_G: f64 = 5.0;
const BUNDLED: &str = include_str!("../assets/foods.json");

#[derive(Debug, thiserror::Error)]
pub enum NutritionError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse food store: {0}")]
    Parse(String),
    #[error("invalid food store: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("unknown food `{0}`")]
    UnknownFood(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Per 100 g unless scaled by [`FoodStore::nutrition_for_portion`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NutritionFacts {
    pub calories_kcal: f64,
    pub protein_g: f64,
    pub carbohydrate_g: f64,
    pub fat_g: f64,
    pub fiber_g: f64,
    pub sugar_g: f64,
}

impl NutritionFacts {
    pub const FIELDS: [&'static str; 6] = ["calories_kcal", "protein_g", "carbohydrate_g", "fat_g", "fiber_g", "sugar_g"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.calories_kcal,
            self.protein_g,
            self.carbohydrate_g,
            self.fat_g,
            self.fiber_g,
            self.sugar_g,
        ]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self {
            calories_kcal: v[0],
            protein_g: v[1],
            carbohydrate_g: v[2],
            fat_g: v[3],
            fiber_g: v[4],
            sugar_g: v[5],
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_values(self.values().map(|v| v * factor))
    }

    /// Human-readable invariant violations, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in Self::FIELDS.iter().zip(self.values()) {
            if !v.is_finite() {
                out.push(format!("{name} is not finite"));
            } else if v < 0.0 {
                out.push(format!("{name} = {v} is negative"));
            }
        }
        let macros = self.protein_g + self.carbohydrate_g + self.fat_g;
        if macros > 100.0 + MACRO_TOLERANCE_G {
            out.push(format!("protein + carbohydrate + fat = {macros} g exceeds 100 g"));
        }
        out
    }
}

fn sat(x: f64) -> f64 {
    x.min(1.0)
}

/// Saturating linear score in 0..=100: protein and fiber raise it, sugar
/// and fat lower it, and all-zero facts score 40. The weights are a fixed
/// convention, not a dietary model.
pub fn health_score(f: &NutritionFacts) -> u8 {
    let raw = 100.0
        * (0.3 * sat(f.protein_g / 25.0) + 0.3 * sat(f.fiber_g / 10.0) - 0.2 * sat(f.sugar_g / 30.0)
            - 0.2 * sat(f.fat_g / 40.0)
            + 0.4);
    raw.round().clamp(0.0, 100.0) as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoodRecord {
    pub class_name: String,
    pub display_name: String,
    pub ingredients: Vec<String>,
    pub nutrition_per_100g: NutritionFacts,
    /// Cached [`health_score`] of the per-100 g facts.
    pub health_value: u8,
}

impl FoodRecord {
    /// Builds a record with its health value computed.
    pub fn new(class_name: &str, display_name: &str, ingredients: Vec<String>, facts: NutritionFacts) -> Self {
        Self {
            class_name: class_name.into(),
            display_name: display_name.into(),
            ingredients,
            health_value: health_score(&facts),
            nutrition_per_100g: facts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoodStore {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub foods: Vec<FoodRecord>,
}

impl FoodStore {
    pub fn new(foods: Vec<FoodRecord>) -> Result<Self, NutritionError> {
        let store = Self {
            version: STORE_VERSION,
            note: None,
            foods,
        };
        store.validate()?;
        Ok(store)
    }

    /// Checks every record and reports all violations at once.
    pub fn validate(&self) -> Result<(), NutritionError> {
        let mut problems = Vec::new();
        if self.version != STORE_VERSION {
            problems.push(format!("unsupported version {}", self.version));
        }
        let mut seen = HashSet::new();
        for r in &self.foods {
            let name = &r.class_name;
            if name.is_empty() {
                problems.push("record with empty class_name".into());
            }
            if !seen.insert(name.as_str()) {
                problems.push(format!("duplicate class_name `{name}`"));
            }
            for v in r.nutrition_per_100g.violations() {
                problems.push(format!("`{name}`: {v}"));
            }
            if r.nutrition_per_100g.violations().is_empty() {
                let expected = health_score(&r.nutrition_per_100g);
                if r.health_value != expected {
                    problems.push(format!(
                        "`{name}`: health_value {} does not match computed {expected}",
                        r.health_value
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(NutritionError::Validation(problems))
        }
    }

    pub fn from_json(text: &str) -> Result<Self, NutritionError> {
        let store: Self = serde_json::from_str(text).map_err(|e| NutritionError::Parse(e.to_string()))?;
        store.validate()?;
        Ok(store)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("store serialises") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self, NutritionError> {
        let text = std::fs::read_to_string(path).map_err(|source| NutritionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            NutritionError::Parse(d) => NutritionError::Parse(format!("{}: {d}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NutritionError> {
        std::fs::write(path, self.to_json()).map_err(|source| NutritionError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// The starter store shipped with the crate (one record per synthetic
    /// class).
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED).expect("bundled store is valid")
    }

    pub fn len(&self) -> usize {
        self.foods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foods.is_empty()
    }

    pub fn get(&self, class_name: &str) -> Result<&FoodRecord, NutritionError> {
        self.foods
            .iter()
            .find(|r| r.class_name == class_name)
            .ok_or_else(|| NutritionError::UnknownFood(class_name.into()))
    }

    /// Facts for `portion_g` grams: per-100 g values times `portion_g / 100`.
    pub fn nutrition_for_portion(&self, class_name: &str, portion_g: f64) -> Result<NutritionFacts, NutritionError> {
        let record = self.get(class_name)?;
        if !(portion_g.is_finite() && portion_g > 0.0) {
            return Err(NutritionError::Argument(format!("portion_g must be positive, got {portion_g}")));
        }
        Ok(record.nutrition_per_100g.scaled(portion_g / 100.0))
    }

    /// Class names without a record.
    pub fn missing_classes<'a>(&self, classes: &'a [String]) -> Vec<&'a str> {
        classes
            .iter()
            .filter(|c| self.get(c).is_err())
            .map(String::as_str)
            .collect()
    }
}
