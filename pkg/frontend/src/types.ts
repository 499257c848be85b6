/** Wire types mirroring the server's JSON responses. */

export interface ApiNode {
  id: number;
  category: string;
  label: string;
  name: string;
  display_names: string[];
  attributes: Record<string, string[]>;
}

export interface ApiEdge {
  src: number;
  dst: number;
  rel_class: string;
  verb: string | null;
  step_order: number | null;
  confidence: number;
}

export interface Subgraph {
  nodes: ApiNode[];
  edges: ApiEdge[];
}

export interface SearchHit {
  node: ApiNode;
  score: number;
}

export interface QaLinkedEntity {
  surface: string;
  category: string;
  node: string | null;
  similarity: number;
}

export interface QaRecord {
  question: string;
  linked: QaLinkedEntity[];
  intent: string | null;
  intent_confidence: number;
  queries: string[];
  rows: string[];
  values: string[];
  failure: string | null;
}
