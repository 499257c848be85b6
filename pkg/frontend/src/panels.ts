import type { QaRecord, SearchHit } from "./types.js";

function esc(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Query panel result table (or an inline error for bad TKQ). */
export function renderQueryResult(rows: string[] | null, error?: string): string {
  if (error !== undefined) {
    return `<div class="error" role="alert">${esc(error)}</div>`;
  }
  if (!rows || rows.length === 0) {
    return `<div class="empty">no results</div>`;
  }
  const body = rows.map((r) => `<tr><td>${esc(r)}</td></tr>`).join("");
  return `<table class="results"><tbody>${body}</tbody></table>`;
}

export function renderSearchHits(hits: SearchHit[]): string {
  if (hits.length === 0) return `<div class="empty">no matches</div>`;
  const items = hits
    .map(
      (h) =>
        `<li data-node-id="${h.node.id}"><span class="label">${esc(h.node.label)}</span> ` +
        `${esc(h.node.name)} <span class="score">${h.score.toFixed(2)}</span></li>`,
    )
    .join("");
  return `<ul class="hits">${items}</ul>`;
}

/**
 * QA trace: one section per processing stage —
 *   1. entity linking, 2. intent + bound query (editable), 3. answer.
 */
export function renderQaTrace(record: QaRecord): string {
  const linked =
    record.linked.length === 0
      ? `<div class="empty">no entities linked</div>`
      : `<ul>` +
        record.linked
          .map(
            (m) =>
              `<li>${esc(m.surface)} &rarr; ${esc(m.node ?? "?")} ` +
              `<span class="cat">${esc(m.category)}</span> ` +
              `<span class="sim">${m.similarity.toFixed(2)}</span></li>`,
          )
          .join("") +
        `</ul>`;

  const queries = record.queries
    .map((q, i) => `<textarea class="bound-query" data-index="${i}">${esc(q)}</textarea>`)
    .join("");
  const intent =
    `<div class="intent">${esc(record.intent ?? "(none)")}` +
    ` <span class="conf">${record.intent_confidence.toFixed(2)}</span></div>` +
    queries +
    `<button class="rerun" type="button">re-run query</button>`;

  const answer = record.failure
    ? `<div class="failure">${esc(record.failure)}</div>`
    : `<ol class="answers">${record.values.map((v) => `<li>${esc(v)}</li>`).join("")}</ol>`;

  return (
    `<section class="qa-stage" data-stage="linking"><h3>1. Entity linking</h3>${linked}</section>` +
    `<section class="qa-stage" data-stage="intent"><h3>2. Intent &amp; query</h3>${intent}</section>` +
    `<section class="qa-stage" data-stage="answer"><h3>3. Answer</h3>${answer}</section>`
  );
}
