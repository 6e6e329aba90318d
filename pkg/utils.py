import re


def safe_float_conversion(value):
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    elif isinstance(value, str):
        try:
            return float(value.strip())
        except ValueError:
            return None
    else:
        return None


def format_float(value):
    # 17桁で書き出せば読み戻したときにビット単位で一致する
    return format(float(value), '.17g')


def parse_float_list(text, separator=','):
    if text is None:
        return []
    values = []
    for token in text.split(separator):
        token = token.strip()
        if not token:
            continue
        value = safe_float_conversion(token)
        if value is None:
            raise ValueError(f"数値に変換できません: {token}")
        values.append(value)
    return values


def parse_int_list(text, separator=','):
    values = parse_float_list(text, separator)
    if any(value != int(value) for value in values):
        raise ValueError(f"整数のリストではありません: {text}")
    return [int(value) for value in values]


def parse_matrix_literal(text):
    # 行は';'、列は','で区切る (例: "0.9,0.1; 0.1,0.9")
    rows = [row for row in text.split(';') if row.strip()]
    matrix = [parse_float_list(row) for row in rows]
    if not matrix or any(len(row) != len(matrix[0]) for row in matrix):
        raise ValueError(f"行列の形式が正しくありません: {text}")
    return matrix


def extract_call(text):
    """'name(a, b, c)' 形式の文字列を名前と引数リストに分解する"""
    match = re.fullmatch(r'\s*([A-Za-z][\w\-]*)\s*\((.*)\)\s*', text)
    if not match:
        return None, []
    name = match.group(1).lower()
    args = [arg.strip() for arg in match.group(2).split(',') if arg.strip()]
    return name, args
