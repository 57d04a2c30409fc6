#!/usr/bin/env python3
"""Schema, row counts, sample values and foreign keys of database.sqlite."""

import sqlite3
import sys

SAMPLE_VALUES = 5


def quote(name):
    return '"' + name.replace('"', '""') + '"'


def profile(db_path, output_file):
    conn = sqlite3.connect(db_path)
    tables = [
        r[0]
        for r in conn.execute(
            "SELECT name FROM sqlite_master WHERE type = 'table' "
            "AND name NOT LIKE 'sqlite_%' ORDER BY name"
        )
    ]
    out = ["# Database profile", ""]
    for table in tables:
        (ddl,) = conn.execute(
            "SELECT sql FROM sqlite_master WHERE name = ?", (table,)
        ).fetchone()
        (rows,) = conn.execute(f"SELECT COUNT(*) FROM {quote(table)}").fetchone()
        out += [f"## {table} ({rows} rows)", "", "```sql", ddl + ";", "```", ""]
        for cid, col, ctype, notnull, default, pk in conn.execute(
            f"PRAGMA table_info({quote(table)})"
        ):
            values = [
                repr(v)
                for (v,) in conn.execute(
                    f"SELECT DISTINCT {quote(col)} FROM {quote(table)} "
                    f"WHERE {quote(col)} IS NOT NULL ORDER BY 1 LIMIT {SAMPLE_VALUES}"
                )
            ]
            (nulls,) = conn.execute(
                f"SELECT COUNT(*) FROM {quote(table)} WHERE {quote(col)} IS NULL"
            ).fetchone()
            out.append(
                f"- {col} {ctype or 'ANY'}: {', '.join(values) or 'no values'}"
                + (f" ({nulls} NULL)" if nulls else "")
            )
        for fk in conn.execute(f"PRAGMA foreign_key_list({quote(table)})"):
            out.append(f"- join: {table}.{fk[3]} = {fk[2]}.{fk[4]}")
        out.append("")
    conn.close()
    with open(output_file, "w") as f:
        f.write("\n".join(out))
    print(f"Profiled {len(tables)} tables")
    return 0


if __name__ == "__main__":
    try:
        sys.exit(profile("database.sqlite", "tool_output/profile.md"))
    except Exception as e:  # noqa: BLE001
        print(f"ERROR: {e}", file=sys.stderr)
        sys.exit(1)
