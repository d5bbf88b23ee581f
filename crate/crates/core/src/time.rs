//! The single canonical datetime format used by every table and artifact.

use chrono::NaiveDateTime;

pub const DATETIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Parses `YYYY-MM-DD HH:MM:SS`. Anything that does not re-format to the
/// exact same string (single-digit fields, fractional seconds, `T` separator)
/// is rejected.
pub fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    let dt = NaiveDateTime::parse_from_str(s, DATETIME_FORMAT).ok()?;
    (format_datetime(&dt) == s).then_some(dt)
}

pub fn format_datetime(dt: &NaiveDateTime) -> String {
    dt.format(DATETIME_FORMAT).to_string()
}

/// Serde adapter for [`NaiveDateTime`] in the canonical format.
pub mod serde_datetime {
    use chrono::NaiveDateTime;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(dt: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_datetime(dt))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse_datetime(&raw)
            .ok_or_else(|| de::Error::custom(format!("expected YYYY-MM-DD HH:MM:SS, got `{raw}`")))
    }
}
