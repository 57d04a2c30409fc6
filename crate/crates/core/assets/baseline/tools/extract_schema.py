#!/usr/bin/env python3
"""Dump every schema DDL statement of database.sqlite."""

import sqlite3
import sys


def extract_schema(db_path: str, output_file: str) -> int:
    try:
        conn = sqlite3.connect(db_path)
        rows = conn.execute(
            "SELECT sql || ';' FROM sqlite_master "
            "WHERE sql IS NOT NULL ORDER BY tbl_name, type DESC, name"
        ).fetchall()
        with open(output_file, "w") as f:
            f.write("\n".join(sql for (sql,) in rows))
        print(f"Wrote {len(rows)} DDL statements")
        conn.close()
        return 0
    except Exception as e:  # noqa: BLE001
        print(f"ERROR: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(extract_schema("database.sqlite", "tool_output/schema.txt"))
