import { ApiError, ServiceClient } from "./api";
import type { EvidenceView, LedgerView, QueryResponse } from "./types";

const STORAGE_KEY = "filingsqa.session";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function streamBadge(stream: string): HTMLElement {
  const badge = el("span", `badge badge-${stream.toLowerCase()}`, stream);
  badge.dataset.stream = stream;
  return badge;
}

export function renderEvidence(evidence: EvidenceView): HTMLElement {
  const panel = el("div", "evidence");
  const head = el("div", "evidence-head");
  head.append(streamBadge(evidence.stream), el("span", "subquery", evidence.subquery));
  panel.append(head);

  if (evidence.error) {
    panel.append(el("div", "evidence-error", `failed: ${evidence.error}`));
    return panel;
  }
  if (evidence.payload.answer !== undefined) {
    panel.append(el("div", "evidence-answer", String(evidence.payload.answer)));
  }
  if (evidence.provenance.length) {
    panel.append(el("div", "provenance", evidence.provenance.join("  ")));
  }
  const bundles = evidence.payload.bundles ?? [];
  if (bundles.length) {
    const details = el("details", "bundles");
    details.append(el("summary", undefined, `${bundles.length} ranked bundles`));
    for (const bundle of bundles) {
      const item = el("div", "bundle");
      item.append(
        el("div", "bundle-head", `${bundle.anchor}  score=${bundle.score.toFixed(4)}`),
        el("div", "bundle-members", bundle.members.join("  ")),
        el("div", "bundle-text", bundle.text),
      );
      details.append(item);
    }
    panel.append(details);
  }
  return panel;
}

export function renderLedgerDelta(ledger: LedgerView): HTMLElement {
  const box = el("div", "ledger-delta");
  const table = el("table");
  const head = el("tr");
  for (const col of ["step", "model", "tokens", "time (s)"]) {
    head.append(el("th", undefined, col));
  }
  table.append(head);
  for (const record of ledger.records) {
    const row = el("tr");
    row.append(
      el("td", undefined, record.step),
      el("td", undefined, record.model),
      el("td", "num", String(record.prompt_tokens + record.completion_tokens)),
      el("td", "num", record.wall_s.toFixed(3)),
    );
    table.append(row);
  }
  box.append(table);
  box.append(el("div", "ledger-subtotal", `turn tokens: ${ledger.total_tokens}`));
  return box;
}

export class ChatConsole {
  root: HTMLElement;
  client: ServiceClient;
  sessionId: string | null = null;
  pending = false;

  private transcript!: HTMLElement;
  private input!: HTMLInputElement;
  private sendButton!: HTMLButtonElement;
  private totalTokens!: HTMLElement;
  private sessionLabel!: HTMLElement;
  private costResult!: HTMLElement;
  private costN!: HTMLInputElement;
  private costT!: HTMLInputElement;

  constructor(root: HTMLElement, client: ServiceClient) {
    this.root = root;
    this.client = client;
    this.build();
  }

  private build(): void {
    this.root.innerHTML = "";
    const header = el("header");
    header.append(el("h1", undefined, "filingsqa console"));
    this.sessionLabel = el("span", "session-id", "no session");
    const newButton = el("button", "new-session", "new session");
    newButton.addEventListener("click", () => void this.newSession());
    header.append(this.sessionLabel, newButton);

    this.transcript = el("div", "transcript");

    const form = el("form", "ask");
    this.input = el("input");
    this.input.placeholder = "Ask about the filings…";
    this.sendButton = el("button", "send", "send");
    form.append(this.input, this.sendButton);
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      void this.send();
    });

    const ledgerBar = el("div", "ledger-total");
    ledgerBar.append(el("span", undefined, "session tokens: "));
    this.totalTokens = el("span", "total-tokens", "0");
    ledgerBar.append(this.totalTokens);

    const cost = el("div", "cost-widget");
    cost.append(el("h2", undefined, "cost estimate"));
    this.costN = el("input", "cost-n");
    this.costN.type = "number";
    this.costN.min = "1";
    this.costN.value = "1";
    this.costT = el("input", "cost-t");
    this.costT.type = "number";
    this.costT.min = "0";
    this.costT.value = "0";
    this.costResult = el("div", "cost-result", "…");
    const labelN = el("label", undefined, "sub-queries n ");
    labelN.append(this.costN);
    const labelT = el("label", undefined, "tools t ");
    labelT.append(this.costT);
    cost.append(labelN, labelT, this.costResult);
    this.costN.addEventListener("change", () => void this.refreshCost());
    this.costT.addEventListener("change", () => void this.refreshCost());

    this.root.append(header, this.transcript, form, ledgerBar, cost);
  }

  /** Restore the stored session if the service still knows it, else start fresh. */
  async init(): Promise<void> {
    const stored = localStorage.getItem(STORAGE_KEY);
    if (stored) {
      try {
        const state = await this.client.getSession(stored);
        this.sessionId = state.session_id;
        this.sessionLabel.textContent = state.session_id;
        for (const turn of state.history) {
          this.transcript.append(
            el("div", `turn turn-${turn.role}`, turn.text),
          );
        }
        this.totalTokens.textContent = String(state.ledger.total_tokens);
        await this.refreshCost();
        return;
      } catch {
        localStorage.removeItem(STORAGE_KEY);
      }
    }
    await this.newSession();
  }

  async newSession(): Promise<void> {
    this.sessionId = await this.client.createSession();
    localStorage.setItem(STORAGE_KEY, this.sessionId);
    this.sessionLabel.textContent = this.sessionId;
    this.transcript.innerHTML = "";
    this.totalTokens.textContent = "0";
    await this.refreshCost();
  }

  async send(): Promise<void> {
    const text = this.input.value.trim();
    if (!text || this.pending || !this.sessionId) return;
    this.pending = true;
    this.sendButton.disabled = true;
    this.input.disabled = true;
    this.transcript.append(el("div", "turn turn-user", text));
    try {
      const response = await this.client.query(this.sessionId, text);
      this.renderResponse(response);
      this.input.value = "";
    } catch (error) {
      const message =
        error instanceof ApiError ? `${error.code}: ${error.message}` : String(error);
      this.transcript.append(el("div", "turn turn-error", message));
    } finally {
      this.pending = false;
      this.sendButton.disabled = false;
      this.input.disabled = false;
    }
  }

  private renderResponse(response: QueryResponse): void {
    const turn = el("div", "turn turn-assistant");
    turn.append(el("div", "answer", response.answer));
    const panels = el("div", "evidence-panels");
    for (const evidence of response.evidence) {
      panels.append(renderEvidence(evidence));
    }
    turn.append(panels, renderLedgerDelta(response.ledger_delta));
    this.transcript.append(turn);
    // totals come from the service ledger, never recomputed client-side
    this.totalTokens.textContent = String(response.ledger_total_tokens);
  }

  async refreshCost(): Promise<void> {
    const n = Number(this.costN.value);
    const t = Number(this.costT.value);
    try {
      const estimate = await this.client.costEstimate(n, t);
      this.costResult.textContent =
        `${estimate.tokens} tokens, $${estimate.usd_per_k_queries.toFixed(3)} per 1k queries`;
    } catch (error) {
      this.costResult.textContent =
        error instanceof ApiError ? `${error.code}: ${error.message}` : String(error);
    }
  }
}
