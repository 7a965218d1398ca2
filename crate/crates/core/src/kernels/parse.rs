//! Recursive-descent parser for the kernel DSL.
//!
//! ```text
//! expr     := term ('+' term)*
//! term     := factor ('*' factor)*
//! factor   := NAME '(' featlist ')' | '(' expr ')'
//! featlist := NAME (',' NAME)*
//! NAME     := [A-Za-z_][A-Za-z0-9_]*
//! ```
//!
//! Nested sums and products are flattened, so `(a + b) + c` parses to the
//! same three-child sum as `a + b + c`.

use super::base::{BaseKernel, KernelKind};
use super::expr::KernelExpr;
use super::KernelError;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Name(String),
    LParen,
    RParen,
    Comma,
    Plus,
    Star,
    End,
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, KernelError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let tok = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'+' => Tok::Plus,
            b'*' => Tok::Star,
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Tok::Name(text[start..i].to_string()), start));
                continue;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(KernelError::Syntax {
                    position: i,
                    message: format!("unexpected character '{ch}'"),
                });
            }
        };
        out.push((tok, i));
        i += 1;
    }
    out.push((Tok::End, text.len()));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    schema: &'a [String],
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if t != Tok::End {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), KernelError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(self.error(format!("expected {what}")))
        }
    }

    fn error(&self, message: String) -> KernelError {
        let found = match self.peek() {
            Tok::Name(n) => format!("'{n}'"),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::Plus => "'+'".into(),
            Tok::Star => "'*'".into(),
            Tok::End => "end of input".into(),
        };
        KernelError::Syntax { position: self.offset(), message: format!("{message}, found {found}") }
    }

    fn expr(&mut self) -> Result<KernelExpr, KernelError> {
        let mut terms = vec![self.term()?];
        while *self.peek() == Tok::Plus {
            self.bump();
            terms.push(self.term()?);
        }
        Ok(flatten(terms, true))
    }

    fn term(&mut self) -> Result<KernelExpr, KernelError> {
        let mut factors = vec![self.factor()?];
        while *self.peek() == Tok::Star {
            self.bump();
            factors.push(self.factor()?);
        }
        Ok(flatten(factors, false))
    }

    fn factor(&mut self) -> Result<KernelExpr, KernelError> {
        match self.peek().clone() {
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::Name(name) => {
                let kind = KernelKind::from_dsl(&name).ok_or(KernelError::UnknownKernel(name))?;
                self.bump();
                self.expect(Tok::LParen, "'(' after kernel name")?;
                let mut features = Vec::new();
                loop {
                    match self.bump() {
                        Tok::Name(f) => features.push(f),
                        _ => {
                            self.pos -= 1;
                            return Err(self.error("expected feature name".into()));
                        }
                    }
                    match self.peek() {
                        Tok::Comma => {
                            self.bump();
                        }
                        Tok::RParen => {
                            self.bump();
                            break;
                        }
                        _ => return Err(self.error("expected ',' or ')'".into())),
                    }
                }
                let columns = features
                    .iter()
                    .map(|f| {
                        self.schema
                            .iter()
                            .position(|s| s == f)
                            .ok_or_else(|| KernelError::UnknownFeature(f.clone()))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(KernelExpr::Leaf(BaseKernel::new(kind, features, columns)?))
            }
            _ => Err(self.error("expected kernel name or '('".into())),
        }
    }
}

fn flatten(items: Vec<KernelExpr>, sum: bool) -> KernelExpr {
    if items.len() == 1 {
        return items.into_iter().next().unwrap();
    }
    let mut out = Vec::new();
    for e in items {
        match e {
            KernelExpr::Sum(c) if sum => out.extend(c),
            KernelExpr::Product(c) if !sum => out.extend(c),
            other => out.push(other),
        }
    }
    if sum {
        KernelExpr::Sum(out)
    } else {
        KernelExpr::Product(out)
    }
}

/// Parses DSL text against a feature schema. Leaves start isotropic with
/// unit variance, lengthscale and period.
pub fn parse_kernel_expr(text: &str, schema: &[String]) -> Result<KernelExpr, KernelError> {
    if text.trim().is_empty() {
        return Err(KernelError::Syntax { position: 0, message: "empty kernel expression".into() });
    }
    for (i, s) in schema.iter().enumerate() {
        if schema[..i].contains(s) {
            return Err(KernelError::DuplicateFeature(s.clone()));
        }
    }
    let mut p = Parser { toks: lex(text)?, pos: 0, schema };
    let mut e = p.expr()?;
    if *p.peek() != Tok::End {
        return Err(p.error("unexpected trailing input".into()));
    }
    e.assign_names();
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn additive_matern_kernel() {
        let s = schema(&["lat", "lon", "elev", "ocean_dist"]);
        let e = parse_kernel_expr("Mat32(lat,lon,elev) + Mat32(ocean_dist)", &s).unwrap();
        let KernelExpr::Sum(children) = &e else { panic!("expected sum, got {e:?}") };
        assert_eq!(children.len(), 2);
        let leaves = e.leaves();
        assert_eq!(leaves[0].kind, KernelKind::Matern32);
        assert_eq!(leaves[0].features, vec!["lat", "lon", "elev"]);
        assert_eq!(leaves[0].columns, vec![0, 1, 2]);
        assert_eq!(leaves[1].features, vec!["ocean_dist"]);
        assert_eq!(e.n_params(), 4);
    }

    #[test]
    fn single_leaf() {
        let e = parse_kernel_expr("SE(x)", &schema(&["x"])).unwrap();
        assert!(matches!(e, KernelExpr::Leaf(ref k) if k.kind == KernelKind::SquaredExponential));
    }

    #[test]
    fn periodic_arity() {
        let err = parse_kernel_expr("SE(x) * Periodic(t,u)", &schema(&["x", "t", "u"])).unwrap_err();
        assert!(matches!(err, KernelError::Arity { expected: 1, found: 2, .. }));
    }

    #[test]
    fn precedence_and_grouping() {
        let s = schema(&["a", "b", "c"]);
        let e = parse_kernel_expr("SE(a) + SE(b) * SE(c)", &s).unwrap();
        let KernelExpr::Sum(c) = &e else { panic!() };
        assert!(matches!(c[1], KernelExpr::Product(_)));
        let e = parse_kernel_expr("(SE(a) + SE(b)) * SE(c)", &s).unwrap();
        let KernelExpr::Product(c) = &e else { panic!() };
        assert!(matches!(c[0], KernelExpr::Sum(_)));
        let flat = parse_kernel_expr("(se(a) + SE(b)) + MAT52(c)", &s).unwrap();
        let KernelExpr::Sum(c) = &flat else { panic!() };
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn errors_are_specific() {
        let s = schema(&["x"]);
        assert!(matches!(
            parse_kernel_expr("RBF(x)", &s),
            Err(KernelError::UnknownKernel(n)) if n == "RBF"
        ));
        assert!(matches!(
            parse_kernel_expr("SE(y)", &s),
            Err(KernelError::UnknownFeature(n)) if n == "y"
        ));
        assert!(matches!(
            parse_kernel_expr("SE(x) +", &s),
            Err(KernelError::Syntax { position: 7, .. })
        ));
        assert!(matches!(
            parse_kernel_expr("SE(x) $ SE(x)", &s),
            Err(KernelError::Syntax { position: 6, .. })
        ));
        assert!(matches!(parse_kernel_expr("SE(x,x)", &s), Err(KernelError::DuplicateFeature(_))));
        assert!(matches!(parse_kernel_expr("  ", &s), Err(KernelError::Syntax { .. })));
        assert!(matches!(parse_kernel_expr("SE()", &s), Err(KernelError::Syntax { position: 3, .. })));
    }

    #[test]
    fn render_reparses() {
        let s = schema(&["a", "b", "c"]);
        for text in [
            "SE(a)",
            "Mat32(a,b) + Mat52(c)",
            "(SE(a) + Periodic(b)) * Mat32(c)",
            "SE(a) * (Mat32(b) + SE(c)) * Mat52(a,c)",
        ] {
            let e = parse_kernel_expr(text, &s).unwrap();
            let again = parse_kernel_expr(&e.render(), &s).unwrap();
            assert!(e.same_structure(&again), "{text} -> {}", e.render());
        }
    }
}
