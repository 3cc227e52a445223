//! Generic SQL source.
//!
//! Only portable SQL is issued: a range filter on the timestamp column plus
//! `ORDER BY`. The timestamp column holds integer microseconds since the
//! epoch (ISO-8601 text is also accepted and re-filtered client side).

use std::path::PathBuf;

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};

use super::{RowStream, Source, SourceError, SourceRow};
use crate::time::Timestamp;

/// Environment variables holding source credentials. Credentials are never
/// read from descriptors or config files.
pub const ENV_USER: &str = "DCSLAKE_SOURCE_USER";
pub const ENV_PASSWORD: &str = "DCSLAKE_SOURCE_PASSWORD";

/// Replaces any `user[:password]@` in the authority with `***@`.
fn redact(descriptor: &str) -> String {
    let Some((scheme, rest)) = descriptor.split_once("://") else {
        return descriptor.to_string();
    };
    let auth_end = rest.find('/').unwrap_or(rest.len());
    match rest[..auth_end].rfind('@') {
        Some(at) => format!("{scheme}://***@{}", &rest[at + 1..]),
        None => descriptor.to_string(),
    }
}

/// `driver://host[:port]/database`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqlEndpoint {
    pub driver: String,
    pub host: String,
    pub port: Option<u16>,
    pub database: String,
}

impl SqlEndpoint {
    pub fn parse(descriptor: &str) -> Result<Self, SourceError> {
        let bad = |reason: &str| SourceError::Endpoint {
            descriptor: redact(descriptor),
            reason: reason.to_string(),
        };
        let (driver, rest) = descriptor
            .split_once(':')
            .ok_or_else(|| bad("missing driver prefix"))?;
        if driver.is_empty() {
            return Err(bad("missing driver prefix"));
        }
        let Some(rest) = rest.strip_prefix("//") else {
            // `sqlite:relative/path.db`
            return Ok(SqlEndpoint {
                driver: driver.to_string(),
                host: String::new(),
                port: None,
                database: rest.to_string(),
            });
        };
        let (authority, database) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, ""),
        };
        if authority.contains('@') {
            return Err(bad(&format!(
                "credentials are not allowed in descriptors; use {ENV_USER} / {ENV_PASSWORD}"
            )));
        }
        let (host, port) = match authority.rsplit_once(':') {
            Some((h, p)) => (h, Some(p.parse::<u16>().map_err(|_| bad("bad port"))?)),
            None => (authority, None),
        };
        if database.is_empty() || database == "/" {
            return Err(bad("missing database"));
        }
        Ok(SqlEndpoint {
            driver: driver.to_string(),
            host: host.to_string(),
            port,
            database: database.to_string(),
        })
    }

    /// Credentials from the environment, if set.
    pub fn credentials() -> Option<(String, Option<String>)> {
        let user = std::env::var(ENV_USER).ok()?;
        Some((user, std::env::var(ENV_PASSWORD).ok()))
    }

    /// Opens a read-only connection for the endpoint's driver.
    pub fn connect(&self) -> Result<Box<dyn SqlConnection>, SourceError> {
        match self.driver.as_str() {
            "sqlite" => {
                if !(self.host.is_empty() || self.host == "localhost") {
                    return Err(SourceError::Unreachable(format!(
                        "sqlite endpoints are local, got host {:?}",
                        self.host
                    )));
                }
                Ok(Box::new(SqliteConnection::open_read_only(PathBuf::from(
                    &self.database,
                ))?))
            }
            other => Err(SourceError::Unreachable(format!(
                "no client available for driver {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SqlParam {
    Integer(i64),
    Real(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SqlValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
}

/// Minimal query interface a SQL backend has to provide.
pub trait SqlConnection: Send {
    fn query(&mut self, sql: &str, params: &[SqlParam]) -> Result<Vec<Vec<SqlValue>>, SourceError>;
}

pub struct SqliteConnection {
    conn: Connection,
}

impl SqliteConnection {
    pub fn open_read_only(path: PathBuf) -> Result<Self, SourceError> {
        if !path.exists() {
            return Err(SourceError::Unreachable(format!(
                "database {} does not exist",
                path.display()
            )));
        }
        let conn = Connection::open_with_flags(
            &path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )
        .map_err(|e| SourceError::Unreachable(format!("{}: {e}", path.display())))?;
        Ok(SqliteConnection { conn })
    }
}

impl SqlConnection for SqliteConnection {
    fn query(&mut self, sql: &str, params: &[SqlParam]) -> Result<Vec<Vec<SqlValue>>, SourceError> {
        let err = |e: rusqlite::Error| SourceError::Sql(e.to_string());
        let mut stmt = self.conn.prepare(sql).map_err(err)?;
        if !stmt.readonly() {
            return Err(SourceError::Sql(format!("refusing non-read-only statement: {sql}")));
        }
        let ncols = stmt.column_count();
        let bound: Vec<Box<dyn rusqlite::ToSql>> = params
            .iter()
            .map(|p| -> Box<dyn rusqlite::ToSql> {
                match p {
                    SqlParam::Integer(i) => Box::new(*i),
                    SqlParam::Real(f) => Box::new(*f),
                    SqlParam::Text(s) => Box::new(s.clone()),
                }
            })
            .collect();
        let mut rows = stmt
            .query(rusqlite::params_from_iter(bound.iter()))
            .map_err(err)?;
        let mut out = Vec::new();
        while let Some(row) = rows.next().map_err(err)? {
            let mut vals = Vec::with_capacity(ncols);
            for i in 0..ncols {
                vals.push(match row.get_ref(i).map_err(err)? {
                    ValueRef::Null => SqlValue::Null,
                    ValueRef::Integer(v) => SqlValue::Integer(v),
                    ValueRef::Real(v) => SqlValue::Real(v),
                    ValueRef::Text(t) => SqlValue::Text(String::from_utf8_lossy(t).into_owned()),
                    ValueRef::Blob(_) => {
                        return Err(SourceError::Sql(format!("unexpected blob in column {i}")))
                    }
                });
            }
            out.push(vals);
        }
        Ok(out)
    }
}

pub(crate) fn check_identifier(name: &str) -> Result<(), SourceError> {
    let ok = !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        && !name.starts_with(|c: char| c.is_ascii_digit());
    if ok {
        Ok(())
    } else {
        Err(SourceError::Sql(format!("invalid identifier {name:?}")))
    }
}

pub(crate) fn value_to_ts(v: &SqlValue) -> Result<Timestamp, String> {
    match v {
        SqlValue::Integer(us) => Ok(Timestamp(*us)),
        SqlValue::Text(s) => Timestamp::parse_iso(s).map_err(|e| e.to_string()),
        other => Err(format!("unsupported timestamp value {other:?}")),
    }
}

fn value_to_f64(v: &SqlValue) -> Result<f64, String> {
    match v {
        SqlValue::Real(f) => Ok(*f),
        SqlValue::Integer(i) => Ok(*i as f64),
        other => Err(format!("unsupported value {other:?}")),
    }
}

/// Range-query client over a table shaped `(element_id, <ts_column>, value,
/// status)`.
pub struct SqlSource {
    label: String,
    endpoint: Option<SqlEndpoint>,
    conn: Option<Box<dyn SqlConnection>>,
    table: String,
    ts_column: String,
}

impl SqlSource {
    /// Lazily connects on first fetch, so an unreachable endpoint surfaces as
    /// a fetch error rather than at construction.
    pub fn new(endpoint: SqlEndpoint, table: &str, ts_column: &str) -> Result<Self, SourceError> {
        check_identifier(table)?;
        check_identifier(ts_column)?;
        Ok(SqlSource {
            label: format!("{}://{}{}", endpoint.driver, endpoint.host, endpoint.database),
            endpoint: Some(endpoint),
            conn: None,
            table: table.to_string(),
            ts_column: ts_column.to_string(),
        })
    }

    pub fn with_connection(
        conn: Box<dyn SqlConnection>,
        table: &str,
        ts_column: &str,
    ) -> Result<Self, SourceError> {
        check_identifier(table)?;
        check_identifier(ts_column)?;
        Ok(SqlSource {
            label: "sql(custom connection)".into(),
            endpoint: None,
            conn: Some(conn),
            table: table.to_string(),
            ts_column: ts_column.to_string(),
        })
    }

    fn connection(&mut self) -> Result<&mut Box<dyn SqlConnection>, SourceError> {
        if self.conn.is_none() {
            let endpoint = self
                .endpoint
                .as_ref()
                .ok_or_else(|| SourceError::Unreachable("no endpoint".into()))?;
            self.conn = Some(endpoint.connect()?);
        }
        Ok(self.conn.as_mut().expect("connected above"))
    }

    /// The statement issued for a given cursor.
    pub fn statement(&self, has_cursor: bool) -> String {
        let filter = if has_cursor {
            format!(" WHERE {} > ?1", self.ts_column)
        } else {
            String::new()
        };
        format!(
            "SELECT element_id, {ts}, value, status FROM {table}{filter} ORDER BY {ts}, element_id",
            ts = self.ts_column,
            table = self.table,
        )
    }
}

impl Source for SqlSource {
    fn describe(&self) -> String {
        format!("{} table={} ts_column={}", self.label, self.table, self.ts_column)
    }

    fn fetch_since(&mut self, cursor: Option<Timestamp>) -> Result<RowStream<'_>, SourceError> {
        let sql = self.statement(cursor.is_some());
        let params: Vec<SqlParam> = cursor.iter().map(|c| SqlParam::Integer(c.0)).collect();
        let raw = self.connection()?.query(&sql, &params)?;
        let mut rows = Vec::with_capacity(raw.len());
        for (i, r) in raw.iter().enumerate() {
            let row = decode_row(r).map_err(|reason| SourceError::Sql(format!("row {i}: {reason}")))?;
            if cursor.is_none_or(|c| row.ts > c) {
                rows.push(row);
            }
        }
        // Text timestamps may not sort like instants server-side.
        rows.sort_by_key(|r| r.ts);
        Ok(Box::new(rows.into_iter().map(Ok)))
    }
}

fn decode_row(r: &[SqlValue]) -> Result<SourceRow, String> {
    if r.len() != 4 {
        return Err(format!("expected 4 columns, got {}", r.len()));
    }
    let element_id = match r[0] {
        SqlValue::Integer(i) => u32::try_from(i).map_err(|_| format!("element_id {i} out of range"))?,
        ref other => return Err(format!("bad element_id {other:?}")),
    };
    let status = match r[3] {
        SqlValue::Null => None,
        SqlValue::Integer(i) => Some(i32::try_from(i).map_err(|_| format!("status {i} out of range"))?),
        ref other => return Err(format!("bad status {other:?}")),
    };
    Ok(SourceRow {
        element_id,
        ts: value_to_ts(&r[1])?,
        value: value_to_f64(&r[2])?,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    fn seeded_db(dir: &std::path::Path, n: i64) -> PathBuf {
        let path = dir.join("src.db");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE eventhistory (element_id INTEGER, ts INTEGER, value REAL, status INTEGER);",
        )
        .unwrap();
        for i in 0..n {
            conn.execute(
                "INSERT INTO eventhistory VALUES (?1, ?2, ?3, ?4)",
                rusqlite::params![i % 7, i * 1_000_000, i as f64 * 0.5, if i % 2 == 0 { Some(i) } else { None }],
            )
            .unwrap();
        }
        path
    }

    #[test]
    fn endpoint_parsing() {
        let e = SqlEndpoint::parse("sqlite:///var/db/x.db").unwrap();
        assert_eq!(e.driver, "sqlite");
        assert_eq!(e.host, "");
        assert_eq!(e.database, "/var/db/x.db");
        let e = SqlEndpoint::parse("oracle://atonr-adg.example:10121/ATONR_ADG").unwrap();
        assert_eq!(e.port, Some(10121));
        assert_eq!(e.database, "/ATONR_ADG");
        let err = SqlEndpoint::parse("oracle://user:pw@host/db").unwrap_err().to_string();
        assert!(!err.contains("pw") && err.contains("***@host/db"), "{err}");
        assert!(SqlEndpoint::parse("sqlite://host").is_err());
    }

    #[test]
    fn range_query_from_cursor() {
        let dir = tempfile::tempdir().unwrap();
        let path = seeded_db(dir.path(), 100);
        let ep = SqlEndpoint::parse(&format!("sqlite://{}", path.display())).unwrap();
        let mut src = SqlSource::new(ep, "eventhistory", "ts").unwrap();
        // Cursor at row 50's timestamp: rows 51..=99.
        let after: Vec<_> = src
            .fetch_since(Some(Timestamp(50 * 1_000_000)))
            .unwrap()
            .map(|r| r.unwrap())
            .collect();
        assert_eq!(after.len(), 49);
        assert_eq!(after[0].ts, Timestamp(51_000_000));
        // Cursor just before row 50: rows 50..=99.
        let n = src.fetch_since(Some(Timestamp(50 * 1_000_000 - 1))).unwrap().count();
        assert_eq!(n, 50);
        assert_eq!(src.fetch_since(Some(Timestamp(1_000_000_000))).unwrap().count(), 0);
        assert_eq!(src.fetch_since(None).unwrap().count(), 100);
    }

    #[test]
    fn unreachable_database() {
        let ep = SqlEndpoint::parse("sqlite:///nonexistent/db.sqlite").unwrap();
        let mut src = SqlSource::new(ep, "t", "ts").unwrap();
        assert!(matches!(src.fetch_since(None).err(), Some(SourceError::Unreachable(_))));
        let ep = SqlEndpoint::parse("oracle://host:1521/db").unwrap();
        let mut src = SqlSource::new(ep, "t", "ts").unwrap();
        assert!(matches!(src.fetch_since(None).err(), Some(SourceError::Unreachable(_))));
    }

    #[test]
    fn identifiers_are_validated() {
        let ep = SqlEndpoint::parse("sqlite:///x.db").unwrap();
        assert!(SqlSource::new(ep.clone(), "t; DROP TABLE t", "ts").is_err());
        assert!(SqlSource::new(ep, "t", "ts--").is_err());
    }

    struct Recording {
        inner: SqliteConnection,
        log: Arc<Mutex<Vec<String>>>,
    }

    impl SqlConnection for Recording {
        fn query(&mut self, sql: &str, params: &[SqlParam]) -> Result<Vec<Vec<SqlValue>>, SourceError> {
            self.log.lock().unwrap().push(sql.to_string());
            self.inner.query(sql, params)
        }
    }

    #[test]
    fn only_select_statements_are_issued() {
        let dir = tempfile::tempdir().unwrap();
        let path = seeded_db(dir.path(), 20);
        let log = Arc::new(Mutex::new(Vec::new()));
        let conn = Recording {
            inner: SqliteConnection::open_read_only(path).unwrap(),
            log: log.clone(),
        };
        let mut src = SqlSource::with_connection(Box::new(conn), "eventhistory", "ts").unwrap();
        src.fetch_since(None).unwrap().for_each(drop);
        src.fetch_since(Some(Timestamp(5_000_000))).unwrap().for_each(drop);
        let log = log.lock().unwrap();
        assert_eq!(log.len(), 2);
        assert!(log.iter().all(|s| s.trim_start().to_ascii_uppercase().starts_with("SELECT ")));
    }

    #[test]
    fn read_only_connection_refuses_writes() {
        let dir = tempfile::tempdir().unwrap();
        let path = seeded_db(dir.path(), 1);
        let mut conn = SqliteConnection::open_read_only(path).unwrap();
        assert!(conn.query("DELETE FROM eventhistory", &[]).is_err());
    }
}
