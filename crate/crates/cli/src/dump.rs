//! Token-by-token renderings of a voken file.

use std::fmt::Write;

pub struct DumpToken<'a> {
    pub token: &'a str,
    pub voken_id: i32,
    pub uri: Option<&'a str>,
    /// Relevance of the token to its voken, `NaN` when unknown.
    pub score: f64,
}

/// `token<TAB>voken_id<TAB>score` lines, sentences separated by a blank line.
pub fn tsv(sentences: &[Vec<DumpToken<'_>>]) -> String {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for t in s {
            let _ = writeln!(out, "{}\t{}\t{}", t.token, t.voken_id, t.score);
        }
    }
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// A standalone page with one table per sentence.
pub fn html(sentences: &[Vec<DumpToken<'_>>], strategy: &str) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>vokens: {title}</title>\n\
         <style>body{{font-family:sans-serif}}table{{border-collapse:collapse;margin:1em 0}}\
         td,th{{border:1px solid #ccc;padding:4px;text-align:center;vertical-align:top}}\
         img{{max-width:120px;max-height:120px;display:block;margin:auto}}</style></head><body>\n\
         <h1>Vokens ({title})</h1>\n",
        title = escape(strategy)
    );
    for (i, s) in sentences.iter().enumerate() {
        let _ = writeln!(out, "<table><caption>sentence {i}</caption>");
        out.push_str("<tr><th>token</th>");
        for t in s {
            let _ = write!(out, "<td>{}</td>", escape(t.token));
        }
        out.push_str("</tr>\n<tr><th>voken</th>");
        for t in s {
            match t.uri {
                Some(uri) => {
                    let uri = escape(uri);
                    let _ = write!(
                        out,
                        "<td><img src=\"{uri}\" alt=\"{uri}\"><a href=\"{uri}\">{}</a></td>",
                        t.voken_id
                    );
                }
                None => {
                    let _ = write!(out, "<td>{}</td>", t.voken_id);
                }
            }
        }
        out.push_str("</tr>\n<tr><th>score</th>");
        for t in s {
            if t.score.is_nan() {
                out.push_str("<td>-</td>");
            } else {
                let _ = write!(out, "<td>{:.3}</td>", t.score);
            }
        }
        out.push_str("</tr></table>\n");
    }
    out.push_str("</body></html>\n");
    out
}
