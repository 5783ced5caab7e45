use std::fmt::Write;

use super::{RelationalDatabase, Table, Value};

fn escape(s: &str, out: &mut String) {
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
}

fn render(table: &Table, col: usize, v: &Value, out: &mut String) {
    match *v {
        Value::Null => out.push_str("\\N"),
        Value::Int(x) => write!(out, "{x}").unwrap(),
        Value::Time(x) => write!(out, "@{x}").unwrap(),
        // 17 significant digits
        Value::Real(x) => write!(out, "{x:.16e}").unwrap(),
        Value::Cat(id) => {
            out.push('"');
            escape(
                table.vocab(col).and_then(|voc| voc.word(id)).unwrap_or(""),
                out,
            );
            out.push('"');
        }
    }
}

/// Deterministic serialisation: tables by name, rows by primary key,
/// columns in schema order. Independent of row storage order and of
/// categorical id assignment.
pub fn canonical_form(db: &RelationalDatabase) -> Vec<u8> {
    let mut out = String::new();
    for table in db.tables() {
        let spec = table.spec();
        out.push_str("table ");
        escape(&spec.name, &mut out);
        out.push('\n');
        for c in &spec.columns {
            let _ = writeln!(out, "column {} {} {}", c.name, c.kind, if c.nullable { "null" } else { "notnull" });
        }
        let _ = writeln!(out, "pk {}", spec.primary_key);
        for fk in &spec.foreign_keys {
            let _ = writeln!(out, "fk {} {}", fk.column, fk.references);
        }
        if let Some(tc) = &spec.time_column {
            let _ = writeln!(out, "time {tc}");
        }
        let mut order: Vec<usize> = (0..table.len()).collect();
        order.sort_by_key(|&i| table.pk(i));
        for i in order {
            for (c, v) in table.row(i).iter().enumerate() {
                if c > 0 {
                    out.push('\t');
                }
                render(table, c, v, &mut out);
            }
            out.push('\n');
        }
    }
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rdb::fixtures::review_db;

    #[test]
    fn deterministic() {
        let db = review_db();
        assert_eq!(canonical_form(&db), canonical_form(&db));
    }

    #[test]
    fn insensitive_to_row_order() {
        let db = review_db();
        let mut swapped = db.clone();
        swapped.table_mut("review").unwrap().swap_rows(0, 2);
        assert_eq!(canonical_form(&db), canonical_form(&swapped));
    }

    #[test]
    fn sensitive_to_attribute_change() {
        let db = review_db();
        let mut changed = db.clone();
        changed
            .table_mut("review")
            .unwrap()
            .set_value(1, 3, Value::Real(3.0000000000000004));
        assert_ne!(canonical_form(&db), canonical_form(&changed));
    }

    #[test]
    fn reals_use_seventeen_digits() {
        let text = String::from_utf8(canonical_form(&review_db())).unwrap();
        assert!(text.contains("4.5000000000000000e0"), "{text}");
    }
}
