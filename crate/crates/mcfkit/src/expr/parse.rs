//! Recursive-descent parser for the field grammar.
//!
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | postfix
//! postfix := primary ('^' integer)*
//! primary := number | 'pi' | 'x<k>' | fn '(' expr ')' | '(' expr ')'
//!
//! The exponent of '^' must be an integer literal, optionally negative and
//! optionally parenthesized; the grammar has no general real powers.

use super::{ExprError, Expression};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src: src.as_bytes(), pos: 0 }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn next(&mut self) -> Result<(Tok, usize), ExprError> {
        self.skip_ws();
        let start = self.pos;
        if self.pos >= self.src.len() {
            return Ok((Tok::End, start));
        }
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => {
                self.pos += 1;
                Tok::Plus
            }
            b'-' => {
                self.pos += 1;
                Tok::Minus
            }
            b'*' => {
                self.pos += 1;
                Tok::Star
            }
            b'/' => {
                self.pos += 1;
                Tok::Slash
            }
            b'^' => {
                self.pos += 1;
                Tok::Caret
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'0'..=b'9' | b'.' => {
                let mut end = self.pos;
                let mut seen_dot = false;
                while end < self.src.len() {
                    let d = self.src[end];
                    if d.is_ascii_digit() {
                        end += 1;
                    } else if d == b'.' && !seen_dot {
                        seen_dot = true;
                        end += 1;
                    } else if (d == b'e' || d == b'E')
                        && end + 1 < self.src.len()
                        && (self.src[end + 1].is_ascii_digit()
                            || ((self.src[end + 1] == b'+' || self.src[end + 1] == b'-')
                                && end + 2 < self.src.len()
                                && self.src[end + 2].is_ascii_digit()))
                    {
                        end += 2;
                        while end < self.src.len() && self.src[end].is_ascii_digit() {
                            end += 1;
                        }
                        break;
                    } else {
                        break;
                    }
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                let v = text.parse::<f64>().map_err(|_| ExprError::Parse {
                    pos: start,
                    msg: format!("malformed number '{text}'"),
                })?;
                self.pos = end;
                Tok::Num(v)
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
                {
                    end += 1;
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                self.pos = end;
                Tok::Ident(text.to_string())
            }
            other => {
                return Err(ExprError::Parse {
                    pos: start,
                    msg: format!("unexpected character '{}'", other as char),
                })
            }
        };
        Ok((tok, start))
    }
}

struct Parser {
    tokens: Vec<(Tok, usize)>,
    idx: usize,
}

impl Parser {
    fn peek(&self) -> &(Tok, usize) {
        &self.tokens[self.idx]
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.tokens[self.idx].clone();
        if self.idx + 1 < self.tokens.len() {
            self.idx += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ExprError> {
        let (t, pos) = self.bump();
        if t == tok {
            Ok(())
        } else {
            Err(ExprError::Parse { pos, msg: format!("expected {what}, found {t:?}") })
        }
    }

    fn expr(&mut self) -> Result<Expression, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek().0 {
                Tok::Plus => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Expression::Add(Box::new(lhs), Box::new(rhs));
                }
                Tok::Minus => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Expression::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expression, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek().0 {
                Tok::Star => {
                    self.bump();
                    let rhs = self.unary()?;
                    lhs = Expression::Mul(Box::new(lhs), Box::new(rhs));
                }
                Tok::Slash => {
                    self.bump();
                    let rhs = self.unary()?;
                    lhs = Expression::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expression, ExprError> {
        if self.peek().0 == Tok::Minus {
            self.bump();
            let inner = self.unary()?;
            return Ok(Expression::Neg(Box::new(inner)));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expression, ExprError> {
        let mut base = self.primary()?;
        while self.peek().0 == Tok::Caret {
            self.bump();
            let k = self.integer_exponent()?;
            base = Expression::Pow(Box::new(base), k);
        }
        Ok(base)
    }

    fn integer_exponent(&mut self) -> Result<i32, ExprError> {
        let parenthesized = self.peek().0 == Tok::LParen;
        if parenthesized {
            self.bump();
        }
        let negative = if self.peek().0 == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        let (t, pos) = self.bump();
        let k = match t {
            Tok::Num(v) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => v as i32,
            Tok::Num(v) => {
                return Err(ExprError::Parse {
                    pos,
                    msg: format!("exponent must be an integer, found {v}"),
                })
            }
            other => {
                return Err(ExprError::Parse {
                    pos,
                    msg: format!("expected integer exponent, found {other:?}"),
                })
            }
        };
        if parenthesized {
            self.expect(Tok::RParen, "')' after exponent")?;
        }
        Ok(if negative { -k } else { k })
    }

    fn primary(&mut self) -> Result<Expression, ExprError> {
        let (t, pos) = self.bump();
        match t {
            Tok::Num(v) => Ok(Expression::Const(v)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::Ident(name) => match name.as_str() {
                "pi" => Ok(Expression::Const(std::f64::consts::PI)),
                "sin" | "cos" | "exp" | "tanh" => {
                    self.expect(Tok::LParen, "'(' after function name")?;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen, "')' closing function argument")?;
                    Ok(match name.as_str() {
                        "sin" => Expression::Sin(Box::new(arg)),
                        "cos" => Expression::Cos(Box::new(arg)),
                        "exp" => Expression::Exp(Box::new(arg)),
                        _ => Expression::Tanh(Box::new(arg)),
                    })
                }
                v if v.starts_with('x') && v[1..].chars().all(|c| c.is_ascii_digit()) && v.len() > 1 => {
                    let k: usize = v[1..].parse().map_err(|_| ExprError::Parse {
                        pos,
                        msg: format!("malformed variable '{v}'"),
                    })?;
                    if k == 0 {
                        return Err(ExprError::Parse {
                            pos,
                            msg: "variables are numbered from x1".into(),
                        });
                    }
                    Ok(Expression::Var(k - 1))
                }
                other => Err(ExprError::Parse {
                    pos,
                    msg: format!("unknown identifier '{other}'"),
                }),
            },
            other => Err(ExprError::Parse {
                pos,
                msg: format!("expected a value, found {other:?}"),
            }),
        }
    }
}

/// Parse an expression in the field grammar.
pub fn parse(src: &str) -> Result<Expression, ExprError> {
    let mut lexer = Lexer::new(src);
    let mut tokens = Vec::new();
    loop {
        let (tok, pos) = lexer.next()?;
        let end = tok == Tok::End;
        tokens.push((tok, pos));
        if end {
            break;
        }
    }
    let mut parser = Parser { tokens, idx: 0 };
    let e = parser.expr()?;
    let (t, pos) = parser.peek().clone();
    if t != Tok::End {
        return Err(ExprError::Parse { pos, msg: format!("trailing input: {t:?}") });
    }
    Ok(e)
}
