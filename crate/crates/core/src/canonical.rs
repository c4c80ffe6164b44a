//! Canonical JSON: sorted object keys, no insignificant whitespace, UTF-8.
//!
//! Every signature in the protocol is computed over these bytes, so the
//! writer sorts keys itself rather than relying on the map ordering that
//! `serde_json` happens to be compiled with.

use serde::Serialize;
use serde_json::Value;

pub fn canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let value = serde_json::to_value(value).expect("wire types always serialize to JSON");
    let mut out = Vec::with_capacity(128);
    write_value(&value, &mut out);
    out
}

pub fn canonical_string<T: Serialize + ?Sized>(value: &T) -> String {
    String::from_utf8(canonical_bytes(value)).expect("canonical JSON is UTF-8")
}

fn write_value(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null | Value::Bool(_) | Value::Number(_) | Value::String(_) => {
            serde_json::to_writer(&mut *out, value).expect("writing to a Vec cannot fail")
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut entries: Vec<_> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            out.push(b'{');
            for (i, (key, item)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, key).expect("writing to a Vec cannot fail");
                out.push(b':');
                write_value(item, out);
            }
            out.push(b'}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn key_order_does_not_matter() {
        let a: Value = serde_json::from_str(r#"{"b":1,"a":{"y":[1,2],"x":"s"}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a":{"x":"s","y":[1,2]},"b":1}"#).unwrap();
        assert_eq!(canonical_bytes(&a), canonical_bytes(&b));
        assert_eq!(canonical_string(&a), r#"{"a":{"x":"s","y":[1,2]},"b":1}"#);
    }

    #[test]
    fn stable_and_escaped() {
        let v = json!({"k": "quote\" and \u{e9}", "n": null, "t": true});
        assert_eq!(canonical_bytes(&v), canonical_bytes(&v));
        assert_eq!(canonical_string(&v), "{\"k\":\"quote\\\" and \u{e9}\",\"n\":null,\"t\":true}");
    }
}
