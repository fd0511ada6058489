//! JSON emission with every float written as 17 significant digits.

use std::io::{self, Write};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter, Serializer};

use crate::error::Result;

/// Compact formatter that renders floats in scientific notation with 17 significant digits,
/// enough for any `f64` to parse back to the same bits.
#[derive(Default)]
pub struct Sig17;

impl Formatter for Sig17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Pretty variant of [`Sig17`] used for human-facing result files.
pub struct Sig17Pretty<'a>(PrettyFormatter<'a>);

impl Default for Sig17Pretty<'_> {
    fn default() -> Self {
        Sig17Pretty(PrettyFormatter::with_indent(b"  "))
    }
}

macro_rules! forward {
    ($($name:ident($($arg:ident: $ty:ty),*);)*) => {
        $(fn $name<W: ?Sized + Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
            self.0.$name(w $(, $arg)*)
        })*
    };
}

impl Formatter for Sig17Pretty<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        Sig17.write_f64(writer, value)
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        Sig17.write_f64(writer, value as f64)
    }

    forward! {
        begin_array();
        end_array();
        begin_array_value(first: bool);
        end_array_value();
        begin_object();
        end_object();
        begin_object_key(first: bool);
        begin_object_value();
        end_object_value();
    }
}

pub fn to_writer<W: Write, S: Serialize + ?Sized>(writer: W, value: &S) -> Result<()> {
    let mut ser = Serializer::with_formatter(writer, Sig17);
    value.serialize(&mut ser)?;
    Ok(())
}

pub fn to_string<S: Serialize + ?Sized>(value: &S) -> Result<String> {
    let mut buf = Vec::new();
    to_writer(&mut buf, value)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn to_string_pretty<S: Serialize + ?Sized>(value: &S) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = Serializer::with_formatter(&mut buf, Sig17Pretty::default());
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_use_seventeen_digits() {
        let s = to_string(&vec![2.0 / 3.0, 1.0, -0.5]).unwrap();
        assert_eq!(s, "[6.6666666666666663e-1,1.0000000000000000e0,-5.0000000000000000e-1]");
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![2.0 / 3.0, 1.0, -0.5]);
    }

    #[test]
    fn non_finite_becomes_null() {
        assert_eq!(to_string(&vec![f64::NAN]).unwrap(), "[null]");
    }

    #[test]
    fn pretty_keeps_float_format() {
        let s = to_string_pretty(&serde_json::json!({"a": [0.1]})).unwrap();
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
    }
}
