//! Templated language instructions and their inverse parser.
//!
//! Instructions follow a closed grammar so a parser can recover exactly which
//! object and zone an episode refers to. The parser is the ground-truth
//! reference for grounding metrics and doubles as a generator test oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::catalog::{ObjectSpec, ShapeKind, SHADE_WORDS, SIZE_WORDS, ZONE_COLORS};
use crate::scenegen::render::Zone;

/// How much detail the instruction carries about the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionStyle {
    /// "put the red disc in the gray box"
    NameOnly,
    /// "put the small bright red disc in the gray box"
    Description,
}

impl InstructionStyle {
    pub fn as_str(&self) -> &'static str {
        match self {
            InstructionStyle::NameOnly => "name_only",
            InstructionStyle::Description => "description",
        }
    }
}

/// Renders the instruction for a target object and zone. `plural` pluralizes
/// the shape word for group tasks that move every instance of the class.
pub fn make_instruction(target: &ObjectSpec, plural: bool, zone: &Zone, style: InstructionStyle) -> String {
    let shape = if plural {
        format!("{}s", target.shape.name())
    } else {
        target.shape.name().to_string()
    };
    match style {
        InstructionStyle::NameOnly => {
            format!("put the {} {} in the {} box", target.color_name, shape, zone.color_name)
        }
        InstructionStyle::Description => format!(
            "put the {} {} {} {} in the {} box",
            target.size_word, target.shade_word, target.color_name, shape, zone.color_name
        ),
    }
}

/// Structured reading of an instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedInstruction {
    pub color: String,
    pub shape: ShapeKind,
    pub size: Option<String>,
    pub shade: Option<String>,
    pub plural: bool,
    pub zone_color: String,
}

fn is_size_word(w: &str) -> bool {
    SIZE_WORDS.iter().any(|(s, _)| *s == w)
}

fn is_shade_word(w: &str) -> bool {
    SHADE_WORDS.iter().any(|(s, _)| *s == w)
}

fn is_color_word(w: &str) -> bool {
    crate::scenegen::catalog::COLOR_FAMILIES.iter().any(|(c, _)| *c == w)
}

fn parse_shape(w: &str) -> Option<(ShapeKind, bool)> {
    if let Some(s) = ShapeKind::from_name(w) {
        return Some((s, false));
    }
    if let Some(stem) = w.strip_suffix('s') {
        if let Some(s) = ShapeKind::from_name(stem) {
            return Some((s, true));
        }
    }
    None
}

/// Inverse of [`make_instruction`]. Rejects anything outside the grammar.
pub fn parse_instruction(text: &str) -> Result<ParsedInstruction> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let fail = |what: &str| Err(Error::invalid(format!("unparseable instruction ({what}): {text:?}")));
    if toks.len() < 7 {
        return fail("too short");
    }
    if toks[0] != "put" || toks[1] != "the" {
        return fail("missing 'put the' prefix");
    }
    let n = toks.len();
    if toks[n - 1] != "box" || toks[n - 3] != "the" || toks[n - 4] != "in" {
        return fail("missing 'in the <zone> box' suffix");
    }
    let zone_color = toks[n - 2];
    if !ZONE_COLORS.iter().any(|(z, _)| *z == zone_color) {
        return fail("unknown zone color");
    }
    let obj = &toks[2..n - 4];
    let (color, shape_tok, size, shade) = match obj {
        [color, shape] => (*color, *shape, None, None),
        [size, shade, color, shape] => (*color, *shape, Some(*size), Some(*shade)),
        _ => return fail("object phrase must have 2 or 4 words"),
    };
    if !is_color_word(color) {
        return fail("unknown color");
    }
    if let Some(s) = size {
        if !is_size_word(s) {
            return fail("unknown size word");
        }
    }
    if let Some(s) = shade {
        if !is_shade_word(s) {
            return fail("unknown shade word");
        }
    }
    let Some((shape, plural)) = parse_shape(shape_tok) else {
        return fail("unknown shape");
    };
    Ok(ParsedInstruction {
        color: color.to_string(),
        shape,
        size: size.map(str::to_string),
        shade: shade.map(str::to_string),
        plural,
        zone_color: zone_color.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::catalog::{zone_rgb, Catalog};
    use crate::scenegen::regions::Rect;

    fn zone(name: &str) -> Zone {
        Zone {
            rect: Rect::new(2.0, 2.0, 20.0, 20.0).unwrap(),
            color_name: name.to_string(),
            rgb: zone_rgb(name).unwrap(),
        }
    }

    #[test]
    fn every_generated_instruction_parses_back() {
        let cat = Catalog::desk();
        for o in &cat.objects {
            for (zname, _) in ZONE_COLORS {
                for style in [InstructionStyle::NameOnly, InstructionStyle::Description] {
                    for plural in [false, true] {
                        let z = zone(zname);
                        let text = make_instruction(o, plural, &z, style);
                        let p = parse_instruction(&text).unwrap_or_else(|e| {
                            panic!("failed to parse {text:?}: {e}")
                        });
                        assert_eq!(p.color, o.color_name);
                        assert_eq!(p.shape, o.shape);
                        assert_eq!(p.plural, plural);
                        assert_eq!(p.zone_color, zname);
                        match style {
                            InstructionStyle::NameOnly => {
                                assert!(p.size.is_none() && p.shade.is_none());
                            }
                            InstructionStyle::Description => {
                                assert_eq!(p.size.as_deref(), Some(o.size_word.as_str()));
                                assert_eq!(p.shade.as_deref(), Some(o.shade_word.as_str()));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn known_sentence_forms() {
        let cat = Catalog::desk();
        let o = cat.instance("red_disc_small_bright").unwrap();
        assert_eq!(
            make_instruction(o, false, &zone("gray"), InstructionStyle::NameOnly),
            "put the red disc in the gray box"
        );
        assert_eq!(
            make_instruction(o, true, &zone("white"), InstructionStyle::Description),
            "put the small bright red discs in the white box"
        );
    }

    #[test]
    fn parser_rejects_malformed_text() {
        for bad in [
            "",
            "put the disc in the gray box",
            "put the red disc in the red box",
            "put the red blob in the gray box",
            "take the red disc to the gray box",
            "put the small red disc in the gray box",
            "put the red disc in the gray crate",
        ] {
            assert!(parse_instruction(bad).is_err(), "accepted {bad:?}");
        }
    }
}
