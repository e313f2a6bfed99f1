//! Reading and writing RFC 7946 GeoJSON.
//!
//! Only polygonal geometry carries meaning here: `Polygon` features are kept
//! as-is and `MultiPolygon` features are split into one feature per member
//! polygon (properties duplicated). Features with any other geometry type
//! are counted and skipped rather than treated as errors, so a mixed
//! annotation file still loads.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use super::{Feature, FeatureCollection, GeoError, Polygon};

/// Result of [`parse_geojson`]: the polygonal features plus the number of
/// features that were skipped because their geometry was not polygonal.
#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub collection: FeatureCollection,
    pub skipped: usize,
}

/// Parses a GeoJSON document.
///
/// The root may be a `FeatureCollection`, a single `Feature`, or a bare
/// `Polygon`/`MultiPolygon` geometry. Syntax errors report the byte offset
/// of the failure; structural problems (wrong types, missing keys) report a
/// description of the offending member.
pub fn parse_geojson(text: &str) -> Result<ParseOutcome, GeoError> {
    let root: Value = serde_json::from_str(text).map_err(|e| GeoError::JsonSyntax {
        message: e.to_string(),
        offset: byte_offset(text, e.line(), e.column()),
    })?;

    let mut features = Vec::new();
    let mut skipped = 0usize;

    match root_type(&root)? {
        "FeatureCollection" => {
            let members = root
                .get("features")
                .ok_or_else(|| structure("FeatureCollection has no \"features\" member"))?
                .as_array()
                .ok_or_else(|| structure("\"features\" is not an array"))?;
            for member in members {
                parse_feature(member, &mut features, &mut skipped)?;
            }
        }
        "Feature" => parse_feature(&root, &mut features, &mut skipped)?,
        _ => {
            // Bare geometry: treat as one feature with no properties.
            parse_geometry(&root, &BTreeMap::new(), &mut features, &mut skipped)?;
        }
    }

    Ok(ParseOutcome {
        collection: FeatureCollection::new(features),
        skipped,
    })
}

/// Serializes a collection as a GeoJSON `FeatureCollection` string.
///
/// Coordinates are written with shortest-round-trip formatting, so parsing
/// the output reproduces the input values exactly. Properties are written in
/// sorted key order, making the output byte-deterministic.
pub fn write_geojson(collection: &FeatureCollection) -> String {
    let features: Vec<Value> = collection
        .features
        .iter()
        .map(|f| {
            let mut props = Map::new();
            for (k, v) in &f.properties {
                props.insert(k.clone(), Value::String(v.clone()));
            }
            json!({
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": polygon_coords(&f.polygon),
                },
                "properties": Value::Object(props),
            })
        })
        .collect();
    let doc = json!({
        "type": "FeatureCollection",
        "features": features,
    });
    serde_json::to_string(&doc).expect("geojson document serializes")
}

fn polygon_coords(polygon: &Polygon) -> Value {
    let rings: Vec<Value> = polygon
        .rings()
        .map(|ring| {
            Value::Array(
                ring.iter()
                    .map(|&(x, y)| Value::Array(vec![json_f64(x), json_f64(y)]))
                    .collect(),
            )
        })
        .collect();
    Value::Array(rings)
}

fn json_f64(v: f64) -> Value {
    serde_json::Number::from_f64(v)
        .map(Value::Number)
        .expect("coordinate values are finite")
}

fn structure(msg: impl Into<String>) -> GeoError {
    GeoError::JsonStructure(msg.into())
}

fn root_type(root: &Value) -> Result<&str, GeoError> {
    root.get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| structure("root object has no \"type\" string"))
}

fn parse_feature(
    member: &Value,
    out: &mut Vec<Feature>,
    skipped: &mut usize,
) -> Result<(), GeoError> {
    if member.get("type").and_then(Value::as_str) != Some("Feature") {
        return Err(structure("features array holds a non-Feature member"));
    }
    let properties = match member.get("properties") {
        None | Some(Value::Null) => BTreeMap::new(),
        Some(Value::Object(map)) => map
            .iter()
            .map(|(k, v)| (k.clone(), stringify_property(v)))
            .collect(),
        Some(_) => return Err(structure("\"properties\" is neither an object nor null")),
    };
    match member.get("geometry") {
        None | Some(Value::Null) => {
            *skipped += 1;
            Ok(())
        }
        Some(geom) => parse_geometry(geom, &properties, out, skipped),
    }
}

fn stringify_property(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_geometry(
    geom: &Value,
    properties: &BTreeMap<String, String>,
    out: &mut Vec<Feature>,
    skipped: &mut usize,
) -> Result<(), GeoError> {
    let gtype = geom
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| structure("geometry has no \"type\" string"))?;
    match gtype {
        "Polygon" => {
            let rings = geom
                .get("coordinates")
                .ok_or_else(|| structure("Polygon has no \"coordinates\""))?;
            out.push(Feature {
                polygon: parse_polygon(rings)?,
                properties: properties.clone(),
            });
            Ok(())
        }
        "MultiPolygon" => {
            let polys = geom
                .get("coordinates")
                .and_then(Value::as_array)
                .ok_or_else(|| structure("MultiPolygon \"coordinates\" is not an array"))?;
            for poly in polys {
                out.push(Feature {
                    polygon: parse_polygon(poly)?,
                    properties: properties.clone(),
                });
            }
            Ok(())
        }
        _ => {
            *skipped += 1;
            Ok(())
        }
    }
}

fn parse_polygon(rings: &Value) -> Result<Polygon, GeoError> {
    let rings = rings
        .as_array()
        .ok_or_else(|| structure("polygon coordinates are not an array of rings"))?;
    if rings.is_empty() {
        return Err(structure("polygon has no rings"));
    }
    let mut parsed = rings.iter().map(parse_ring).collect::<Result<Vec<_>, _>>()?;
    let exterior = parsed.remove(0);
    Ok(Polygon::new(exterior, parsed))
}

fn parse_ring(ring: &Value) -> Result<Vec<(f64, f64)>, GeoError> {
    let ring = ring
        .as_array()
        .ok_or_else(|| structure("ring is not an array of positions"))?;
    ring.iter()
        .map(|pos| {
            let pos = pos
                .as_array()
                .ok_or_else(|| structure("position is not an array"))?;
            if pos.len() < 2 {
                return Err(structure("position has fewer than two coordinates"));
            }
            let x = pos[0]
                .as_f64()
                .ok_or_else(|| structure("coordinate is not a number"))?;
            let y = pos[1]
                .as_f64()
                .ok_or_else(|| structure("coordinate is not a number"))?;
            Ok((x, y))
        })
        .collect()
}

/// Converts serde's 1-based line/column error location into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut remaining = line - 1;
    let mut offset = 0usize;
    for (i, b) in text.bytes().enumerate() {
        if remaining == 0 {
            break;
        }
        if b == b'\n' {
            remaining -= 1;
            offset = i + 1;
        }
    }
    (offset + column.saturating_sub(1)).min(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Polygon {
        Polygon::new(
            vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)],
            vec![],
        )
    }

    #[test]
    fn parses_feature_collection_with_properties() {
        let text = r#"{
            "type": "FeatureCollection",
            "features": [{
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [[[0,0],[1,0],[1,1],[0,1],[0,0]]]},
                "properties": {"building": "yes", "disaster": "damaged_area"}
            }]
        }"#;
        let out = parse_geojson(text).unwrap();
        assert_eq!(out.skipped, 0);
        assert_eq!(out.collection.len(), 1);
        let f = &out.collection.features[0];
        assert_eq!(f.properties["building"], "yes");
        assert_eq!(f.properties["disaster"], "damaged_area");
        assert_eq!(f.polygon, unit_square());
    }

    #[test]
    fn splits_multipolygon_and_duplicates_properties() {
        let text = r#"{
            "type": "Feature",
            "geometry": {"type": "MultiPolygon", "coordinates": [
                [[[0,0],[1,0],[1,1],[0,0]]],
                [[[5,5],[6,5],[6,6],[5,5]]]
            ]},
            "properties": {"building": "yes"}
        }"#;
        let out = parse_geojson(text).unwrap();
        assert_eq!(out.collection.len(), 2);
        assert!(out
            .collection
            .features
            .iter()
            .all(|f| f.properties["building"] == "yes"));
        assert_ne!(
            out.collection.features[0].polygon,
            out.collection.features[1].polygon
        );
    }

    #[test]
    fn skips_non_polygonal_geometry() {
        let text = r#"{
            "type": "FeatureCollection",
            "features": [
                {"type": "Feature", "geometry": {"type": "Point", "coordinates": [1, 2]}, "properties": null},
                {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [[[0,0],[1,0],[1,1],[0,0]]]}, "properties": null},
                {"type": "Feature", "geometry": null, "properties": {"a": "b"}}
            ]
        }"#;
        let out = parse_geojson(text).unwrap();
        assert_eq!(out.collection.len(), 1);
        assert_eq!(out.skipped, 2);
    }

    #[test]
    fn syntax_error_reports_byte_offset() {
        let text = "{\"type\": \"FeatureCollection\", \"features\": [}";
        let err = parse_geojson(text).unwrap_err();
        match err {
            GeoError::JsonSyntax { offset, .. } => {
                assert_eq!(offset, 43);
                assert_eq!(text.as_bytes()[offset], b'}');
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn syntax_error_offset_counts_newlines() {
        let text = "{\n  \"type\": oops\n}";
        let err = parse_geojson(text).unwrap_err();
        match err {
            GeoError::JsonSyntax { offset, .. } => {
                assert_eq!(&text.as_bytes()[offset..offset + 4], b"oops");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn structure_error_names_member() {
        let text = r#"{"type": "FeatureCollection", "features": 5}"#;
        let err = parse_geojson(text).unwrap_err();
        assert!(err.to_string().contains("\"features\""), "{err}");
    }

    #[test]
    fn non_string_properties_keep_their_json_form() {
        let text = r#"{
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [[[0,0],[1,0],[1,1],[0,0]]]},
            "properties": {"stories": 3, "tags": ["a", "b"], "ok": true}
        }"#;
        let out = parse_geojson(text).unwrap();
        let props = &out.collection.features[0].properties;
        assert_eq!(props["stories"], "3");
        assert_eq!(props["tags"], r#"["a","b"]"#);
        assert_eq!(props["ok"], "true");
    }

    #[test]
    fn write_then_parse_is_identity() {
        let mut props = BTreeMap::new();
        props.insert("building".to_string(), "yes".to_string());
        props.insert("disaster".to_string(), "damaged_area".to_string());
        let fc = FeatureCollection::new(vec![
            Feature {
                polygon: Polygon::new(
                    vec![
                        (-119.2278, 34.3065),
                        (-119.19160000000001, 34.3065),
                        (-119.1916, 34.28360000000003),
                    ],
                    vec![vec![(-119.2, 34.29), (-119.199, 34.29), (-119.199, 34.291)]],
                ),
                properties: props,
            },
            Feature {
                polygon: unit_square(),
                properties: BTreeMap::new(),
            },
        ]);
        let text = write_geojson(&fc);
        let back = parse_geojson(&text).unwrap();
        assert_eq!(back.skipped, 0);
        assert_eq!(back.collection, fc);
        // Byte-determinism: same collection, same bytes.
        assert_eq!(write_geojson(&back.collection), text);
    }

    #[test]
    fn holes_survive_the_round_trip() {
        let fc = FeatureCollection::new(vec![Feature {
            polygon: Polygon::new(
                vec![(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)],
                vec![vec![(2.0, 2.0), (4.0, 2.0), (4.0, 4.0), (2.0, 4.0)]],
            ),
            properties: BTreeMap::new(),
        }]);
        let back = parse_geojson(&write_geojson(&fc)).unwrap();
        assert_eq!(back.collection.features[0].polygon.holes.len(), 1);
        assert_eq!(back.collection, fc);
    }
}
