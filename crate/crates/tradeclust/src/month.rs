use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Calendar month, the aggregation unit for trading snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month {
    year: i32,
    /// 1..=12
    month: u32,
}

impl Month {
    pub fn new(year: i32, month: u32) -> Option<Month> {
        if (1..=12).contains(&month) {
            Some(Month { year, month })
        } else {
            None
        }
    }

    pub fn of(date: NaiveDate) -> Month {
        Month {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn month(&self) -> u32 {
        self.month
    }

    pub fn next(&self) -> Month {
        self.add_months(1)
    }

    pub fn add_months(&self, n: i32) -> Month {
        let total = self.year * 12 + (self.month as i32 - 1) + n;
        Month {
            year: total.div_euclid(12),
            month: (total.rem_euclid(12) + 1) as u32,
        }
    }

    /// Signed number of months from `other` to `self`.
    pub fn months_since(&self, other: Month) -> i32 {
        (self.year - other.year) * 12 + self.month as i32 - other.month as i32
    }

    pub fn first_day(&self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("valid month")
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        date.year() == self.year && date.month() == self.month
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for Month {
    type Err = Error;

    fn from_str(s: &str) -> Result<Month, Error> {
        let (y, m) = s
            .split_once('-')
            .ok_or_else(|| Error::InvalidInput(format!("bad month '{s}', expected YYYY-MM")))?;
        let year: i32 = y
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad year in month '{s}'")))?;
        let month: u32 = m
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad month in '{s}'")))?;
        Month::new(year, month).ok_or_else(|| Error::InvalidInput(format!("month out of range: '{s}'")))
    }
}

impl Serialize for Month {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Month, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive month range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonthRange {
    pub start: Month,
    pub end: Month,
}

impl MonthRange {
    pub fn new(start: Month, end: Month) -> Result<MonthRange, Error> {
        if start > end {
            return Err(Error::InvalidInput(format!(
                "empty month range {start}..{end}"
            )));
        }
        Ok(MonthRange { start, end })
    }

    pub fn iter(&self) -> impl Iterator<Item = Month> + '_ {
        let n = self.end.months_since(self.start);
        (0..=n).map(move |i| self.start.add_months(i))
    }

    pub fn contains(&self, m: Month) -> bool {
        self.start <= m && m <= self.end
    }

    pub fn len(&self) -> usize {
        (self.end.months_since(self.start) + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl FromStr for MonthRange {
    type Err = Error;

    /// Parses `YYYY-MM:YYYY-MM` (inclusive) or a single `YYYY-MM`.
    fn from_str(s: &str) -> Result<MonthRange, Error> {
        match s.split_once(':') {
            Some((a, b)) => MonthRange::new(a.parse()?, b.parse()?),
            None => {
                let m: Month = s.parse()?;
                MonthRange::new(m, m)
            }
        }
    }
}

impl fmt::Display for MonthRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}
