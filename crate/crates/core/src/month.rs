//! Calendar months as a totally ordered integer index.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

/// A calendar month, stored as `year * 12 + (month - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Month(i32);

impl Month {
    pub fn new(year: i32, month: u32) -> Self {
        assert!((1..=12).contains(&month), "month out of range: {month}");
        Month(year * 12 + month as i32 - 1)
    }

    pub fn from_date(date: NaiveDate) -> Self {
        Month::new(date.year(), date.month())
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(12)
    }

    pub fn month(self) -> u32 {
        self.0.rem_euclid(12) as u32 + 1
    }

    pub fn index(self) -> i32 {
        self.0
    }

    pub fn from_index(index: i32) -> Self {
        Month(index)
    }

    pub fn offset(self, months: i32) -> Self {
        Month(self.0 + months)
    }

    /// Number of months from `other` to `self`.
    pub fn since(self, other: Month) -> i32 {
        self.0 - other.0
    }

    /// Inclusive range of months.
    pub fn range_inclusive(first: Month, last: Month) -> impl Iterator<Item = Month> {
        (first.0..=last.0).map(Month)
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

impl FromStr for Month {
    type Err = String;

    /// Accepts `YYYY-MM` or a full ISO date `YYYY-MM-DD`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let mut parts = s.split('-');
        let year = parts
            .next()
            .and_then(|p| p.parse::<i32>().ok())
            .ok_or_else(|| format!("bad month {s:?}"))?;
        let month = parts
            .next()
            .and_then(|p| p.parse::<u32>().ok())
            .filter(|m| (1..=12).contains(m))
            .ok_or_else(|| format!("bad month {s:?}"))?;
        if let Some(day) = parts.next() {
            NaiveDate::from_ymd_opt(
                year,
                month,
                day.parse().map_err(|_| format!("bad date {s:?}"))?,
            )
            .ok_or_else(|| format!("bad date {s:?}"))?;
        }
        if parts.next().is_some() {
            return Err(format!("bad month {s:?}"));
        }
        Ok(Month::new(year, month))
    }
}

impl From<Month> for String {
    fn from(m: Month) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Month {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}
