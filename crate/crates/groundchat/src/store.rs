//! Session persistence in an embedded transactional key-value file.

use std::path::Path;

use redb::{Database, ReadableDatabase, ReadableTable, TableDefinition};

use crate::error::ServiceError;
use crate::session::Session;

const SESSIONS: TableDefinition<&str, &str> = TableDefinition::new("sessions");

fn store_err(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Store(e.to_string())
}

pub struct SessionStore {
    db: Database,
}

impl SessionStore {
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let db = Database::create(path).map_err(store_err)?;
        let tx = db.begin_write().map_err(store_err)?;
        tx.open_table(SESSIONS).map_err(store_err)?;
        tx.commit().map_err(store_err)?;
        Ok(Self { db })
    }

    pub fn get(&self, id: &str) -> Result<Option<Session>, ServiceError> {
        let tx = self.db.begin_read().map_err(store_err)?;
        let table = tx.open_table(SESSIONS).map_err(store_err)?;
        let Some(v) = table.get(id).map_err(store_err)? else {
            return Ok(None);
        };
        serde_json::from_str(v.value()).map(Some).map_err(store_err)
    }

    /// Loads `id` or fails with not-found.
    pub fn load(&self, id: &str) -> Result<Session, ServiceError> {
        self.get(id)?.ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn put(&self, session: &Session) -> Result<(), ServiceError> {
        let json = serde_json::to_string(session).map_err(store_err)?;
        let tx = self.db.begin_write().map_err(store_err)?;
        {
            let mut table = tx.open_table(SESSIONS).map_err(store_err)?;
            table.insert(session.id.as_str(), json.as_str()).map_err(store_err)?;
        }
        tx.commit().map_err(store_err)
    }

    pub fn ids(&self) -> Result<Vec<String>, ServiceError> {
        let tx = self.db.begin_read().map_err(store_err)?;
        let table = tx.open_table(SESSIONS).map_err(store_err)?;
        let mut out = Vec::new();
        for row in table.iter().map_err(store_err)? {
            let (k, _) = row.map_err(store_err)?;
            out.push(k.value().to_string());
        }
        Ok(out)
    }
}
